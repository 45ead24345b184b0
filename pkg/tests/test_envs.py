import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from puorl import envs
from puorl.envs import ActionMap, DomainSpec, MixtureSpec, Quality
from puorl.errors import ConfigError, EnvStepError
from puorl.nn_core import Rng

# frozen regression values from reference_returns(default_positive(), 1000, Rng(0))
RANDOM_ANCHOR = -163.35226595110453
EXPERT_ANCHOR = -23.611589781647996


def pos():
    return envs.default_positive()


def test_huge_mass_ignores_action():
    spec = dataclasses.replace(pos(), mass=1e9)
    s = np.array([0.2, -0.3, 0.5, -0.4])
    s2, _, _ = envs.step(spec, s, np.array([1.0, -1.0]), Rng(0))
    assert np.allclose(s2[2:], 0.95 * s[2:], atol=1e-9)


def test_zero_action_zero_velocity_stays_put():
    s = np.array([0.3, -0.7, 0.0, 0.0])
    s2, r, done = envs.step(pos(), s, np.zeros(2), Rng(0))
    assert np.array_equal(s2, s)
    assert r == pytest.approx(-np.linalg.norm(s[:2] - np.array([1.0, 1.0])))
    assert not done


def test_mass_three_velocity_delta_is_one_third():
    s = np.array([0.1, 0.2, 0.3, -0.1])
    a = np.array([0.6, -0.8])
    p2, _, _ = envs.step(pos(), s, a, Rng(5))
    n2, _, _ = envs.step(envs.body_mass_negative(), s, a, Rng(5))
    dv_p = p2[2:] - 0.95 * s[2:]
    dv_n = n2[2:] - 0.95 * s[2:]
    assert np.allclose(dv_p, 3.0 * dv_n, rtol=1e-9)
    assert np.allclose(dv_p, a * 0.1, rtol=1e-9)


def test_step_rejects_nonfinite():
    with pytest.raises(EnvStepError):
        envs.step(pos(), np.array([np.nan, 0, 0, 0]), np.zeros(2), Rng(0))


def test_rollout_lengths_and_done():
    traj = envs.rollout(pos(), envs.behavior_policy(Quality.MEDIUM), Rng(0))
    assert len(traj) == 100
    assert [t.done for t in traj] == [False] * 99 + [True]
    one = envs.rollout(dataclasses.replace(pos(), horizon=1), envs.behavior_policy(Quality.RANDOM), Rng(0))
    assert len(one) == 1 and one[0].done


def test_rollout_tags_domain():
    traj = envs.rollout(envs.body_mass_negative(), envs.behavior_policy(Quality.EXPERT), Rng(0), domain_id=2)
    assert {t.true_domain for t in traj} == {2}


def test_random_policy_action_mean_is_centered():
    cols = envs.rollout_arrays(pos(), envs.behavior_policy(Quality.RANDOM), 100, Rng(3))
    a = cols["a"]
    assert len(a) == 10000
    sigma = np.sqrt(1 / 3) / np.sqrt(len(a))  # std of U[-1, 1] is 1/sqrt(3)
    assert np.all(np.abs(a.mean(axis=0)) < 3 * sigma)


def test_expert_reaches_goal_from_fixed_start():
    traj = envs.rollout(pos(), envs.behavior_policy(Quality.EXPERT), Rng(1), start=np.array([-0.5, -0.5, 0, 0]))
    assert np.linalg.norm(traj[-1].s_next[:2] - np.array([1.0, 1.0])) < 0.1


def test_actions_always_in_box():
    for q in Quality:
        for spec in (pos(), envs.entire_body_negative(), envs.body_mass_negative()):
            a = envs.rollout_arrays(spec, envs.behavior_policy(q), 20, Rng(0))["a"]
            assert a.min() >= -1 and a.max() <= 1


def test_reference_anchor_regression():
    rand, expert = envs.reference_returns(pos(), 1000, Rng(0))
    assert rand == pytest.approx(RANDOM_ANCHOR, rel=1e-12)
    assert expert == pytest.approx(EXPERT_ANCHOR, rel=1e-12)
    assert envs.reference_returns(pos(), 1000, Rng(0)) == (rand, expert)


def test_expert_normalizes_to_hundred():
    anchors = (RANDOM_ANCHOR, EXPERT_ANCHOR)
    rets = envs.episode_returns(pos(), envs.behavior_policy(Quality.EXPERT), 1000, Rng(99))
    assert float(envs.normalized_score(rets, anchors).mean()) == pytest.approx(100, abs=2)


def test_reference_returns_guards():
    with pytest.raises(ConfigError):
        envs.reference_returns(pos(), 99, Rng(0))
    # a near-immovable puck makes both policies score the same up to the start states
    broken = dataclasses.replace(pos(), friction=0.999, mass=1e9)
    with pytest.raises(ConfigError):
        envs.reference_returns(broken, 100, Rng(0))


def test_mixture_weights_validated():
    MixtureSpec((pos(), pos()), (0.5, 0.5))
    with pytest.raises(ValueError):
        MixtureSpec((pos(), pos()), (0.5, 0.6))
    with pytest.raises(ValueError):
        MixtureSpec((pos(), pos()), (1.5, -0.5))


def test_reward_is_shared_across_dynamics():
    gen = np.random.default_rng(0)
    s2 = gen.normal(size=(50, 4))
    specs = [pos(), envs.body_mass_negative(), envs.joint_noise_negative(), envs.entire_body_negative()]
    rewards = [envs.reward(sp, s2) for sp in specs]
    for r in rewards[1:]:
        assert r.tobytes() == rewards[0].tobytes()
    for sp in specs[1:]:
        assert sp.same_task_as(pos())


def _predict(spec, s, a):
    force = envs.map_action(spec.action_map, a)
    v = 0.95 * s[:, 2:] + force / spec.mass * spec.dt
    return np.concatenate([s[:, :2] + v * spec.dt, v], axis=1)


def _labelled(neg, n, seed):
    gen = np.random.default_rng(seed)
    s = gen.uniform(-1, 1, size=(2 * n, 4))
    a = gen.uniform(-1, 1, size=(2 * n, 2))
    y = np.repeat([0, 1], n)
    s2 = np.where(y[:, None] == 0, _predict(pos(), s, a), _predict(neg, s, a))
    return s, a, s2, y


@pytest.mark.parametrize("neg", [envs.body_mass_negative(), envs.entire_body_negative()])
def test_closed_form_discriminator_separates_domains(neg):
    s, a, s2, y = _labelled(neg, 5000, 0)
    d_pos = np.linalg.norm(s2 - _predict(pos(), s, a), axis=1)
    d_neg = np.linalg.norm(s2 - _predict(neg, s, a), axis=1)
    assert np.mean((d_neg < d_pos) == (y == 1)) > 0.99


def test_rotate90_shift_has_larger_margin_than_mass_shift():
    gen = np.random.default_rng(1)
    s = gen.uniform(-1, 1, size=(5000, 4))
    a = gen.uniform(-1, 1, size=(5000, 2))
    base = _predict(pos(), s, a)
    margin_mass = np.linalg.norm(_predict(envs.body_mass_negative(), s, a) - base, axis=1).mean()
    margin_rot = np.linalg.norm(_predict(envs.entire_body_negative(), s, a) - base, axis=1).mean()
    assert margin_rot > margin_mass > 0


@settings(max_examples=40, deadline=None)
@given(mode=st.sampled_from(list(ActionMap)), x=st.floats(-1, 1), y=st.floats(-1, 1))
def test_unmap_inverts_map(mode, x, y):
    a = np.array([x, y])
    assert np.allclose(envs.map_action(mode, envs.unmap_action(mode, a)), a)


def test_spec_dict_round_trip():
    for sp in (pos(), envs.entire_body_negative(), envs.reward_shift_negative()):
        assert DomainSpec.from_dict(sp.to_dict()) == sp
