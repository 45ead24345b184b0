"""TD3+BC and IQL on top of :mod:`puorl.nn_core`, plus evaluation rollouts."""

from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import envs, nn_core
from .errors import DataError, FormatError, TrainingDivergenceError
from .losses import expectile_loss, mse
from .nn_core import Activation, adam_init, adam_step, backward, forward, init_mlp, polyak_update

AGENT_MAGIC = b"PUORLAG1"
LOG2PI = float(np.log(2 * np.pi))


class AgentKind(str, enum.Enum):
    TD3BC = "td3bc"
    IQL = "iql"


AGENT_TAGS = {AgentKind.TD3BC: 0, AgentKind.IQL: 1}


@dataclass
class Td3BcConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    alpha: float = 2.5
    policy_freq: int = 2
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden: tuple = (256, 256)
    batch_size: int = 256


@dataclass
class IqlConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    expectile: float = 0.7
    temperature: float = 3.0
    max_weight: float = 100.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden: tuple = (256, 256)
    batch_size: int = 256

    def __post_init__(self):
        if not 0 < self.expectile < 1:
            raise ValueError(f"expectile must lie in (0, 1), got {self.expectile}")


def _concat(s, a):
    return np.concatenate([s, a], axis=1)


class _Agent:
    state_mean: np.ndarray
    state_std: np.ndarray

    def normalize(self, s):
        return ((np.asarray(s, dtype=np.float32) - self.state_mean) / self.state_std).astype(np.float32)

    def act(self, states):
        """Deterministic action for raw (unnormalized) states."""
        return np.clip(self._mean_action(self.normalize(np.atleast_2d(states))), -1.0, 1.0)


class Td3BcAgent(_Agent):
    kind = AgentKind.TD3BC

    def __init__(self, state_dim, action_dim, config=None, rng=None):
        self.config = config = config or Td3BcConfig()
        rng = rng or nn_core.Rng(0)
        h = list(config.hidden)
        self.actor = init_mlp([state_dim, *h, action_dim], rng.child("actor"), Activation.RELU, Activation.TANH)
        self.critic1 = init_mlp([state_dim + action_dim, *h, 1], rng.child("critic1"))
        self.critic2 = init_mlp([state_dim + action_dim, *h, 1], rng.child("critic2"))
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.actor_opt = adam_init(self.actor.parameters(), config.actor_lr)
        self.critic1_opt = adam_init(self.critic1.parameters(), config.critic_lr)
        self.critic2_opt = adam_init(self.critic2.parameters(), config.critic_lr)
        self.total_it = 0
        self.state_mean = np.zeros(state_dim, dtype=np.float32)
        self.state_std = np.ones(state_dim, dtype=np.float32)

    def networks(self):
        return [self.actor, self.critic1, self.critic2, self.actor_target, self.critic1_target, self.critic2_target]

    def _mean_action(self, s):
        return forward(self.actor, s)


class IqlAgent(_Agent):
    kind = AgentKind.IQL

    def __init__(self, state_dim, action_dim, config=None, rng=None):
        self.config = config = config or IqlConfig()
        rng = rng or nn_core.Rng(0)
        h = list(config.hidden)
        self.value = init_mlp([state_dim, *h, 1], rng.child("value"))
        self.critic1 = init_mlp([state_dim + action_dim, *h, 1], rng.child("critic1"))
        self.critic2 = init_mlp([state_dim + action_dim, *h, 1], rng.child("critic2"))
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.actor = init_mlp([state_dim, *h, action_dim], rng.child("actor"), Activation.RELU, Activation.TANH)
        self.log_std = np.zeros(action_dim, dtype=np.float32)
        self.value_opt = adam_init(self.value.parameters(), config.critic_lr)
        self.critic1_opt = adam_init(self.critic1.parameters(), config.critic_lr)
        self.critic2_opt = adam_init(self.critic2.parameters(), config.critic_lr)
        self.actor_opt = adam_init(self.actor_params(), config.actor_lr)
        self.total_it = 0
        self.state_mean = np.zeros(state_dim, dtype=np.float32)
        self.state_std = np.ones(state_dim, dtype=np.float32)

    def actor_params(self):
        params = self.actor.parameters("actor.")
        params["log_std"] = self.log_std
        return params

    def networks(self):
        return [self.value, self.critic1, self.critic2, self.critic1_target, self.critic2_target, self.actor]

    def _mean_action(self, s):
        return forward(self.actor, s)


def make_agent(kind, state_dim, action_dim, config=None, rng=None):
    kind = AgentKind(kind)
    cls = Td3BcAgent if kind is AgentKind.TD3BC else IqlAgent
    return cls(state_dim, action_dim, config, rng)


# ------------------------------------------------------------------- TD3+BC

def _critic_step(net, opt, sa, target, name):
    q, cache = forward(net, sa, return_cache=True)
    loss, dq = mse(q, target)
    grads = backward(net, sa, dq, cache=cache)
    adam_step(net.parameters(), grads.named(), opt)
    return loss, q


def td3bc_target(agent, batch, rng):
    """``r + gamma * (1 - done) * min(Q1', Q2')(s', clip(pi'(s') + clipped noise))``."""
    cfg = agent.config
    s2 = batch["s_next"]
    noise = np.clip(rng.gen.normal(size=(len(s2), agent.actor.out_dim)) * cfg.policy_noise,
                    -cfg.noise_clip, cfg.noise_clip).astype(np.float32)
    a2 = np.clip(forward(agent.actor_target, s2) + noise, -1.0, 1.0)
    sa2 = _concat(s2, a2)
    q_next = np.minimum(forward(agent.critic1_target, sa2), forward(agent.critic2_target, sa2))
    return batch["r"][:, None] + cfg.gamma * (1.0 - batch["done"][:, None]) * q_next


def td3bc_actor_loss(actor, critic, s, a, alpha):
    """``-lambda * mean Q(s, pi(s)) + mse(pi(s), a)`` with ``lambda = alpha / mean|Q|``.

    Returns ``(loss, actor Gradients, lambda)``; lambda is treated as a constant.
    """
    pi, cache = forward(actor, s, return_cache=True)
    sa = _concat(s, pi)
    q, qcache = forward(critic, sa, return_cache=True)
    mean_abs = float(np.mean(np.abs(q), dtype=np.float64))
    lam = alpha / max(mean_abs, 1e-8)
    bc, d_bc = mse(pi, a)
    loss = -lam * float(np.mean(q, dtype=np.float64)) + bc
    dq = np.full_like(q, -lam / len(q))
    d_pi = backward(critic, sa, dq, cache=qcache).inputs[:, s.shape[1]:] + d_bc
    return loss, backward(actor, s, d_pi, cache=cache), lam


def td3bc_update(agent, batch, rng):
    """One TD3+BC step on an already normalized batch; returns loss stats."""
    cfg = agent.config
    agent.total_it += 1
    if len(batch["r"]) == 0:
        raise DataError("empty batch")
    y = td3bc_target(agent, batch, rng)
    sa = _concat(batch["s"], batch["a"])
    l1, _ = _critic_step(agent.critic1, agent.critic1_opt, sa, y, "critic1")
    l2, _ = _critic_step(agent.critic2, agent.critic2_opt, sa, y, "critic2")
    stats = {"critic_loss": l1 + l2}
    if agent.total_it % cfg.policy_freq == 0:
        loss, grads, lam = td3bc_actor_loss(agent.actor, agent.critic1, batch["s"], batch["a"], cfg.alpha)
        adam_step(agent.actor.parameters(), grads.named(), agent.actor_opt)
        for tgt, src in ((agent.actor_target, agent.actor), (agent.critic1_target, agent.critic1),
                         (agent.critic2_target, agent.critic2)):
            polyak_update(tgt, src, cfg.tau)
        stats["actor_loss"] = loss
        stats["lambda"] = lam
    if not all(np.isfinite(v) for v in stats.values()):
        raise TrainingDivergenceError(f"non-finite TD3+BC loss at step {agent.total_it}", step=agent.total_it)
    return stats


# ---------------------------------------------------------------------- IQL

def gaussian_log_prob(a, mean, log_std):
    z = (a - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG2PI, axis=1)


def awr_actor_loss(actor, log_std_param, s, a, weights, log_std_bounds=(-5.0, 2.0)):
    """``-mean(w * log N(a; pi(s), exp(log_std)))``; returns ``(loss, actor Gradients, d log_std)``."""
    mean, cache = forward(actor, s, return_cache=True)
    lo, hi = log_std_bounds
    log_std = np.clip(log_std_param, lo, hi)
    inv_var = np.exp(-2.0 * log_std)
    diff = a - mean
    logp = gaussian_log_prob(a, mean, log_std)
    n = len(s)
    loss = -float(np.mean(weights * logp, dtype=np.float64))
    w = (weights / n)[:, None].astype(mean.dtype)
    d_mean = -w * diff * inv_var
    d_log_std = -np.sum(w * (diff * diff * inv_var - 1.0), axis=0, dtype=np.float64).astype(mean.dtype)
    d_log_std *= (log_std_param >= lo) & (log_std_param <= hi)
    return loss, backward(actor, s, d_mean, cache=cache), d_log_std


def advantage_weights(adv, temperature, max_weight=100.0):
    return np.minimum(np.exp(temperature * adv), max_weight)


def iql_update(agent, batch, rng=None):
    """Value, actor and critic steps (in that order), then Polyak targets."""
    cfg = agent.config
    agent.total_it += 1
    if len(batch["r"]) == 0:
        raise DataError("empty batch")
    s, a = batch["s"], batch["a"]
    sa = _concat(s, a)
    q_t = np.minimum(forward(agent.critic1_target, sa), forward(agent.critic2_target, sa))

    v, vcache = forward(agent.value, s, return_cache=True)
    v_loss, d_u = expectile_loss(q_t - v, cfg.expectile)
    grads = backward(agent.value, s, -d_u, cache=vcache)
    adam_step(agent.value.parameters(), grads.named(), agent.value_opt)

    adv = (q_t - forward(agent.value, s))[:, 0]
    w = advantage_weights(adv, cfg.temperature, cfg.max_weight)
    a_loss, a_grads, d_log_std = awr_actor_loss(agent.actor, agent.log_std, s, a, w,
                                                 (cfg.log_std_min, cfg.log_std_max))
    g = a_grads.named("actor.")
    g["log_std"] = d_log_std
    adam_step(agent.actor_params(), g, agent.actor_opt)

    y = batch["r"][:, None] + cfg.gamma * (1.0 - batch["done"][:, None]) * forward(agent.value, batch["s_next"])
    l1, _ = _critic_step(agent.critic1, agent.critic1_opt, sa, y, "critic1")
    l2, _ = _critic_step(agent.critic2, agent.critic2_opt, sa, y, "critic2")
    polyak_update(agent.critic1_target, agent.critic1, cfg.tau)
    polyak_update(agent.critic2_target, agent.critic2, cfg.tau)
    stats = {"value_loss": v_loss, "actor_loss": a_loss, "critic_loss": l1 + l2}
    if not all(np.isfinite(x) for x in stats.values()):
        raise TrainingDivergenceError(f"non-finite IQL loss at step {agent.total_it}", step=agent.total_it)
    return stats


# -------------------------------------------------------------------- train

def state_normalizer(dataset, eps=1e-3):
    s = dataset.s.astype(np.float64)
    return s.mean(axis=0).astype(np.float32), (s.std(axis=0) + eps).astype(np.float32)


def normalized_batch(agent, ds, index=None):
    sub = ds if index is None else ds.subset(index)
    return {"s": agent.normalize(sub.s), "a": sub.a, "r": sub.r, "s_next": agent.normalize(sub.s_next),
            "done": sub.done}


@dataclass
class LossCurves:
    steps: list = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def append(self, step, stats):
        # an interval may miss a key (e.g. no delayed actor step); pad with nan
        for k in stats:
            self.values.setdefault(k, [float("nan")] * len(self.steps))
        self.steps.append(step)
        for k, col in self.values.items():
            col.append(stats.get(k, float("nan")))

    def to_csv(self):
        keys = sorted(self.values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *keys])
        for i, step in enumerate(self.steps):
            w.writerow([step, *(repr(float(self.values[k][i])) for k in keys)])
        return buf.getvalue()


def train(agent_kind, dataset, steps, rng, config=None, batch_provider=None, log_interval=1000):
    """Fit an agent for ``steps`` minibatch updates.

    States are normalized with the mean/std of ``dataset`` computed once.
    ``batch_provider(step, rng)`` may replace uniform sampling; it must return
    a raw TransitionDataset batch.
    """
    kind = AgentKind(agent_kind)
    config = config or (Td3BcConfig() if kind is AgentKind.TD3BC else IqlConfig())
    if dataset.count < config.batch_size:
        raise DataError(f"dataset has {dataset.count} rows, fewer than batch size {config.batch_size}")
    agent = make_agent(kind, dataset.state_dim, dataset.action_dim, config, rng.child("init"))
    agent.state_mean, agent.state_std = state_normalizer(dataset)
    update = td3bc_update if kind is AgentKind.TD3BC else iql_update
    sample_rng, update_rng = rng.child("sample"), rng.child("update")
    curves = LossCurves()
    acc = {}
    for step in range(1, steps + 1):
        if batch_provider is None:
            idx = sample_rng.gen.integers(0, dataset.count, size=config.batch_size)
            batch = normalized_batch(agent, dataset, idx)
        else:
            batch = normalized_batch(agent, batch_provider(step, sample_rng))
        stats = update(agent, batch, update_rng)
        for k, v in stats.items():
            acc.setdefault(k, []).append(v)
        if step % log_interval == 0 or step == steps:
            curves.append(step, {k: float(np.mean(v)) for k, v in acc.items()})
            acc = {}
    return agent, curves


# ----------------------------------------------------------------- evaluate

@dataclass
class EvalResult:
    returns: list
    normalized_scores: list
    mean: float
    count: int


class ScriptedAgent:
    """Expose a BehaviorPolicy through the agent ``act`` interface."""

    def __init__(self, policy, spec, rng):
        self.policy, self.spec, self.rng = policy, spec, rng

    def act(self, states):
        return self.policy.act(self.spec, states, self.rng)


def evaluate(agent, spec, n_episodes, rng, anchors):
    """Undiscounted returns in ``spec`` from the deterministic actor, normalized by ``anchors``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rets = envs.episode_returns(spec, agent.act, n_episodes, rng)
    norm = envs.normalized_score(rets, anchors)
    return EvalResult([float(x) for x in rets], [float(x) for x in norm], float(np.mean(norm)), n_episodes)


# -------------------------------------------------------------- checkpoints

def agent_to_bytes(agent):
    out = [AGENT_MAGIC, struct.pack("<BI", AGENT_TAGS[agent.kind], len(agent.state_mean))]
    out.append(agent.state_mean.astype("<f4").tobytes())
    out.append(agent.state_std.astype("<f4").tobytes())
    nets = agent.networks()
    out.append(struct.pack("<I", len(nets)))
    out.extend(nn_core.mlp_to_bytes(n) for n in nets)
    extra = agent.log_std if agent.kind is AgentKind.IQL else np.zeros(0, np.float32)
    out.append(struct.pack("<I", len(extra)))
    out.append(extra.astype("<f4").tobytes())
    return b"".join(out)


def agent_from_bytes(data, config=None):
    fh = io.BytesIO(data)
    if fh.read(len(AGENT_MAGIC)) != AGENT_MAGIC:
        raise FormatError("bad agent checkpoint magic")
    tag, sd = struct.unpack("<BI", fh.read(5))
    kinds = {v: k for k, v in AGENT_TAGS.items()}
    if tag not in kinds:
        raise FormatError(f"unknown agent kind tag {tag}")
    kind = kinds[tag]
    mean = np.frombuffer(fh.read(4 * sd), "<f4").astype(np.float32)
    std = np.frombuffer(fh.read(4 * sd), "<f4").astype(np.float32)
    (n_nets,) = struct.unpack("<I", fh.read(4))
    nets = [nn_core.read_mlp(fh) for _ in range(n_nets)]
    (n_extra,) = struct.unpack("<I", fh.read(4))
    extra = np.frombuffer(fh.read(4 * n_extra), "<f4").astype(np.float32)
    ad = nets[0].out_dim if kind is AgentKind.TD3BC else nets[-1].out_dim
    if config is None:
        hidden = tuple(nets[0].layer_dims[1:-1])
        config = Td3BcConfig(hidden=hidden) if kind is AgentKind.TD3BC else IqlConfig(hidden=hidden)
    agent = make_agent(kind, sd, ad, config)
    if kind is AgentKind.TD3BC:
        acts = [Activation.TANH, None, None, Activation.TANH, None, None]
        names = ["actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target"]
    else:
        acts = [None, None, None, None, None, Activation.TANH]
        names = ["value", "critic1", "critic2", "critic1_target", "critic2_target", "actor"]
        agent.log_std[...] = extra  # in place: actor_opt is keyed on this array
    for name, net, act in zip(names, nets, acts):
        net.output_activation = act or Activation.IDENTITY
        setattr(agent, name, net)  # optimizer moments stay fresh
    agent.state_mean, agent.state_std = mean, std
    return agent
