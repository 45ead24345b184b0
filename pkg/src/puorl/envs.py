"""Puck domains: a 2-D point mass pushed toward a goal under per-domain dynamics.

State is ``(px, py, vx, vy)``, actions live in ``[-1, 1]^2``. Domains in one
problem share the reward, the initial-state distribution and the horizon;
mass, friction, actuator noise and the action map are what shift.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, EnvStepError

STATE_DIM = 4
ACTION_DIM = 2
INIT_LOW = -1.0
INIT_HIGH = 1.0


class ActionMap(str, enum.Enum):
    IDENTITY = "identity"
    ROTATE90 = "rotate90"
    NEGATE = "negate"


class Quality(str, enum.Enum):
    EXPERT = "expert"
    MEDIUM = "medium"
    RANDOM = "random"


def map_action(kind, action):
    kind = ActionMap(kind)
    if kind is ActionMap.ROTATE90:
        return np.stack([-action[..., 1], action[..., 0]], axis=-1)
    if kind is ActionMap.NEGATE:
        return -action
    return action


def unmap_action(kind, force):
    """Inverse of :func:`map_action`."""
    kind = ActionMap(kind)
    if kind is ActionMap.ROTATE90:
        return np.stack([force[..., 1], -force[..., 0]], axis=-1)
    if kind is ActionMap.NEGATE:
        return -force
    return force


@dataclass(frozen=True)
class DomainSpec:
    env_family: str = "Puck"
    mass: float = 1.0
    friction: float = 0.05
    action_noise_std: float = 0.0
    action_map: ActionMap = ActionMap.IDENTITY
    dt: float = 0.1
    horizon: int = 100
    goal: tuple = (1.0, 1.0)
    # Nonzero only for reward-shift problems, where dynamics are shared instead.
    reward_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "action_map", ActionMap(self.action_map))
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        if self.env_family != "Puck":
            raise ConfigError(f"unknown env family {self.env_family!r}")
        if not self.mass > 0:
            raise ConfigError(f"mass must be positive, got {self.mass}")
        if not 0 <= self.friction < 1:
            raise ConfigError(f"friction must lie in [0, 1), got {self.friction}")
        if self.action_noise_std < 0:
            raise ConfigError("action_noise_std must be nonnegative")
        if not self.dt > 0 or self.horizon < 1:
            raise ConfigError("dt must be positive and horizon >= 1")
        if len(self.goal) != 2:
            raise ConfigError("goal must be a 2-D point")

    def to_dict(self):
        d = asdict(self)
        d["action_map"] = self.action_map.value
        d["goal"] = list(self.goal)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def same_task_as(self, other):
        """True when reward, start distribution and horizon agree."""
        return (self.env_family, self.dt, self.horizon, self.goal) == (
            other.env_family, other.dt, other.horizon, other.goal)


@dataclass(frozen=True)
class MixtureSpec:
    negative_domains: tuple
    eta: tuple

    def __post_init__(self):
        object.__setattr__(self, "negative_domains", tuple(self.negative_domains))
        object.__setattr__(self, "eta", tuple(float(e) for e in self.eta))
        if len(self.negative_domains) != len(self.eta) or not self.eta:
            raise ConfigError("need one eta weight per negative domain")
        if any(e < 0 for e in self.eta) or abs(sum(self.eta) - 1.0) > 1e-9:
            raise ConfigError(f"eta must be nonnegative and sum to 1, got {self.eta}")

    def to_dict(self):
        return {"negative_domains": [d.to_dict() for d in self.negative_domains], "eta": list(self.eta)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(DomainSpec.from_dict(x) for x in d["negative_domains"]), tuple(d["eta"]))


def default_positive():
    return DomainSpec()


def body_mass_negative():
    return DomainSpec(mass=3.0)


def joint_noise_negative():
    return DomainSpec(action_noise_std=0.5)


def entire_body_negative():
    return DomainSpec(action_map=ActionMap.ROTATE90)


def reward_shift_negative(offset=-0.5):
    return DomainSpec(reward_offset=offset)


SHIFTS = {
    "body_mass": lambda: MixtureSpec((body_mass_negative(),), (1.0,)),
    "mixture": lambda: MixtureSpec((body_mass_negative(), joint_noise_negative()), (0.5, 0.5)),
    "entire_body": lambda: MixtureSpec((entire_body_negative(),), (1.0,)),
    "reward": lambda: MixtureSpec((reward_shift_negative(),), (1.0,)),
    "none": lambda: MixtureSpec((default_positive(),), (1.0,)),
}


def initial_states(n, rng):
    pos = rng.gen.uniform(INIT_LOW, INIT_HIGH, size=(n, 2))
    return np.concatenate([pos, np.zeros((n, 2))], axis=1)


def reward(spec, next_state):
    goal = np.asarray(spec.goal)
    return -np.linalg.norm(next_state[..., :2] - goal, axis=-1) + spec.reward_offset


def step(spec, state, action, rng, t=0):
    """Advance one step; works on a single state or a leading batch axis.

    ``t`` is the index of the step being taken, so ``done`` is raised on the
    ``horizon``-th step. Actuator noise is always drawn, then scaled, so
    domains differing only in noise consume the stream identically.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise EnvStepError("non-finite state or action")
    if action.shape[-1] != ACTION_DIM or state.shape[-1] != STATE_DIM:
        raise EnvStepError(f"bad shapes state {state.shape} action {action.shape}")
    noise = rng.gen.normal(size=action.shape) * spec.action_noise_std
    force = map_action(spec.action_map, action) + noise
    vel = (1.0 - spec.friction) * state[..., 2:] + (force / spec.mass) * spec.dt
    pos = state[..., :2] + vel * spec.dt
    nxt = np.concatenate([pos, vel], axis=-1)
    if not np.all(np.isfinite(nxt)):
        raise EnvStepError("dynamics produced a non-finite state")
    done = np.full(state.shape[:-1], t + 1 >= spec.horizon)
    return nxt, reward(spec, nxt), done


@dataclass(frozen=True)
class BehaviorPolicy:
    """Scripted PD controller aware of the domain it acts in.

    The desired acceleration ``kp * (goal - p) - kd * v`` is turned into a
    force for the domain's mass and pulled back through its action map.
    """

    quality: Quality
    kp: float = 0.0
    kd: float = 0.0
    noise_std: float = 0.0

    def act(self, spec, state, rng):
        state = np.atleast_2d(state)
        n = state.shape[0]
        if Quality(self.quality) is Quality.RANDOM:
            return rng.gen.uniform(-1.0, 1.0, size=(n, ACTION_DIM))
        goal = np.asarray(spec.goal)
        accel = self.kp * (goal - state[:, :2]) - self.kd * state[:, 2:]
        action = unmap_action(spec.action_map, spec.mass * accel)
        action = action + rng.gen.normal(size=action.shape) * self.noise_std
        return np.clip(action, -1.0, 1.0)


POLICIES = {
    Quality.EXPERT: BehaviorPolicy(Quality.EXPERT, kp=2.0, kd=2.0, noise_std=0.2),
    Quality.MEDIUM: BehaviorPolicy(Quality.MEDIUM, kp=0.2, kd=0.2, noise_std=0.8),
    Quality.RANDOM: BehaviorPolicy(Quality.RANDOM),
}


def behavior_policy(quality):
    return POLICIES[Quality(quality)]


def rollout_arrays(spec, policy, n_episodes, rng, start=None):
    """Run ``n_episodes`` in lockstep; returns a dict of ``(n_episodes * horizon, ...)`` columns.

    Rows are ordered episode-major. ``policy`` is either a BehaviorPolicy or
    any callable mapping a state batch to actions.
    """
    act_rng, env_rng = rng.child("act"), rng.child("env")
    s = initial_states(n_episodes, rng.child("init")) if start is None else np.tile(
        np.asarray(start, dtype=np.float64), (n_episodes, 1))
    S, A, R, S2, D = [], [], [], [], []
    for t in range(spec.horizon):
        if isinstance(policy, BehaviorPolicy):
            a = policy.act(spec, s, act_rng)
        else:
            a = np.asarray(policy(s), dtype=np.float64)
        a = np.clip(a, -1.0, 1.0)
        s2, r, d = step(spec, s, a, env_rng, t)
        S.append(s); A.append(a); R.append(r); S2.append(s2); D.append(d)
        s = s2
    # (horizon, n, ...) -> (n, horizon, ...) -> flat
    def flat(xs):
        x = np.stack(xs, axis=1)
        return x.reshape((-1,) + x.shape[2:])
    return {"s": flat(S), "a": flat(A), "r": flat(R), "s_next": flat(S2), "done": flat(D)}


def rollout(spec, policy, rng, domain_id=0, start=None):
    """One episode as a list of :class:`puorl.data.Transition`."""
    from .data import Transition

    cols = rollout_arrays(spec, policy, 1, rng, start=start)
    return [
        Transition(cols["s"][i], cols["a"][i], float(cols["r"][i]), cols["s_next"][i],
                   bool(cols["done"][i]), domain_id)
        for i in range(spec.horizon)
    ]


def episode_returns(spec, policy, n_episodes, rng, start=None):
    cols = rollout_arrays(spec, policy, n_episodes, rng, start=start)
    return cols["r"].reshape(n_episodes, spec.horizon).sum(axis=1)


def reference_returns(spec, n_episodes, rng):
    """Monte-Carlo (random_return, expert_return) used to normalize scores."""
    if n_episodes < 100:
        raise ConfigError(f"need at least 100 episodes for anchors, got {n_episodes}")
    rand = float(episode_returns(spec, behavior_policy(Quality.RANDOM), n_episodes, rng.child("random")).mean())
    expert = float(episode_returns(spec, behavior_policy(Quality.EXPERT), n_episodes, rng.child("expert")).mean())
    if expert <= rand:
        raise ConfigError(f"degenerate normalization: expert {expert} <= random {rand}")
    return rand, expert


def normalized_score(ret, anchors):
    rand, expert = anchors
    return 100.0 * (np.asarray(ret) - rand) / (expert - rand)
