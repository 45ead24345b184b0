import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from puorl import envs, pu_learn
from puorl.data import build_problem, reveal_true_domains
from puorl.errors import (BatchError, DegenerateTrainingError, EstimationError, ModeError,
                          TrainingDivergenceError)
from puorl.nn_core import Rng, mlp_to_bytes
from puorl.pu_learn import (ClassifierConfig, PuBatchView, bbe_from_probs, cvir_keep_mask, nnpu_risk,
                            pn_risk)

FAST = ClassifierConfig(epochs_warmup=2, epochs_main=3)


def brute_nnpu(pp, pu, alpha):
    # logistic surrogate: loss(+1) = -log p, loss(-1) = -log(1 - p)
    rp_pos = sum(-math.log(p) for p in pp) / len(pp)
    rp_neg = sum(-math.log(1 - p) for p in pp) / len(pp)
    ru_neg = sum(-math.log(1 - p) for p in pu) / len(pu)
    return alpha * rp_pos + max(0.0, ru_neg - alpha * rp_neg)


def test_nnpu_hand_example():
    got = nnpu_risk([0.9, 0.8], [0.6, 0.1], 0.5).value
    assert got == pytest.approx(brute_nnpu([0.9, 0.8], [0.6, 0.1], 0.5), rel=1e-12)


def test_nnpu_alpha_zero_is_unlabeled_negative_risk():
    pu = [0.3, 0.7, 0.2]
    assert nnpu_risk([0.9], pu, 0.0).value == pytest.approx(np.mean(-np.log1p(-np.array(pu))))


def test_nnpu_alpha_one_confident_is_near_zero():
    assert nnpu_risk([1 - 1e-6] * 3, [1 - 1e-6] * 4, 1.0).value < 1e-5


def test_nnpu_empty_side():
    with pytest.raises(BatchError):
        nnpu_risk([], [0.5], 0.3)
    with pytest.raises(BatchError):
        pn_risk([0.5], [])


def test_nnpu_gradient_zero_for_unlabeled_when_clamped():
    r = nnpu_risk([0.2, 0.3], [0.1, 0.05], 1.0)  # negative bracket
    assert not r.grad_u.any()


@settings(max_examples=50, deadline=None)
@given(pp=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12),
       pu=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12),
       alpha=st.floats(0, 1), seed=st.integers(0, 100))
def test_nnpu_permutation_invariant_and_nonnegative(pp, pu, alpha, seed):
    g = np.random.default_rng(seed)
    a = nnpu_risk(pp, pu, alpha).value
    b = nnpu_risk(g.permutation(pp), g.permutation(pu), alpha).value
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    assert a >= 0
    assert a == pytest.approx(brute_nnpu(pp, pu, alpha), rel=1e-9)


def test_cvir_mask_sort_oracle():
    probs = np.array([0.2, 0.9, 0.4, 0.85, 0.1, 0.7, 0.3, 0.95, 0.5, 0.6])
    keep = cvir_keep_mask(probs, 0.3)
    dropped = set(np.flatnonzero(~keep))
    assert dropped == set(sorted(range(10), key=lambda i: -probs[i])[:3]) == {7, 1, 3}


def test_cvir_mask_alpha_zero_keeps_all():
    assert cvir_keep_mask(np.random.default_rng(0).random(20), 0.0).all()


def test_cvir_ties_drop_lowest_index_first():
    keep = cvir_keep_mask(np.array([0.5, 0.9, 0.9, 0.9, 0.1]), 0.4)
    assert list(np.flatnonzero(~keep)) == [1, 2]


def test_cvir_alpha_one_is_degenerate():
    with pytest.raises(DegenerateTrainingError):
        cvir_keep_mask(np.ones(5) * 0.5, 1.0)


def _state_and_view(small_problem, seed=0):
    cfg = ClassifierConfig()
    xp = pu_learn.classifier_inputs(small_problem.positive, cfg.input_mode)
    xu = pu_learn.classifier_inputs(small_problem.unlabeled, cfg.input_mode)
    shift, scale = xu.mean(0), xu.std(0) + 1e-6
    state = pu_learn.new_classifier(4, 2, cfg, Rng(seed), shift, scale)
    return state, PuBatchView(state.normalize(xp), state.normalize(xu))


def test_cvir_epoch_alpha_zero_equals_pn_training(small_problem):
    s1, v1 = _state_and_view(small_problem)
    s2, v2 = _state_and_view(small_problem)
    s1.alpha_hat = 0.0
    pu_learn.cvir_epoch(s1, v1, Rng(3))
    pu_learn._epoch(s2, v2, Rng(3), pn_risk, 0)
    assert v1.keep.all()
    assert mlp_to_bytes(s1.net) == mlp_to_bytes(s2.net)


def test_cvir_epoch_masks_only_unlabeled(small_problem):
    state, view = _state_and_view(small_problem)
    state.alpha_hat = 0.3
    n_p = len(view.positive_inputs)
    pu_learn.cvir_epoch(state, view, Rng(0))
    assert len(view.keep) == len(view.unlabeled_inputs)
    assert len(view.positive_inputs) == n_p
    assert (~view.keep).sum() == round(0.3 * len(view.keep))


def test_cvir_epoch_alpha_one_raises(small_problem):
    state, view = _state_and_view(small_problem)
    state.alpha_hat = 1.0
    with pytest.raises(DegenerateTrainingError):
        pu_learn.cvir_epoch(state, view, Rng(0))


def test_nonfinite_loss_reports_epoch(small_problem):
    state, view = _state_and_view(small_problem)
    bad = lambda pp, pu: pu_learn.PuRisk(float("nan"), np.zeros(len(pp)), np.zeros(len(pu)))
    with pytest.raises(TrainingDivergenceError) as exc:
        pu_learn._epoch(state, view, Rng(0), bad, 7)
    assert exc.value.step == 7


def test_bbe_perfect_classifier():
    n_u, alpha = 2000, 0.3
    pu = np.r_[np.ones(int(alpha * n_u)), np.zeros(n_u - int(alpha * n_u))]
    pp = np.ones(500)
    est = bbe_from_probs(pp, pu)
    penalty = 0.1 * math.sqrt(math.log(10) / n_u)
    # direct counting: q_u = 0.3, q_p = 1 at every z, so alpha_hat = 0.3 + penalty
    assert est == pytest.approx(0.3 + penalty)
    assert 0.30 - penalty <= est <= 0.32


def test_bbe_identical_holdouts_clamp_to_one():
    p = np.random.default_rng(0).random(300)
    assert bbe_from_probs(p, p.copy()) == 1.0


def test_bbe_no_positives_is_at_most_penalty():
    pu = np.zeros(1000)
    est = bbe_from_probs(np.ones(100), pu)
    assert est <= 0.1 * math.sqrt(math.log(10) / 1000) + 1e-12


def test_bbe_collapsed_classifier():
    with pytest.raises(EstimationError):
        bbe_from_probs(np.zeros(50), np.zeros(50))
    with pytest.raises(EstimationError):
        bbe_from_probs([], [0.5])


@settings(max_examples=40, deadline=None)
@given(pp=st.lists(st.floats(0, 1), min_size=20, max_size=60),
       pu=st.lists(st.floats(0, 1), min_size=20, max_size=60), extra=st.integers(1, 30))
def test_bbe_monotone_in_confident_positives(pp, pu, extra):
    pp = np.asarray(pp)
    pp[: max(1, len(pp) // 4)] = 1.0  # keep at least one valid threshold
    base = bbe_from_probs(pp, pu)
    more = bbe_from_probs(pp, np.r_[pu, np.ones(extra)])
    assert more >= base - 1e-12


def test_train_classifier_is_deterministic(small_problem):
    a = pu_learn.train_classifier(small_problem, FAST, Rng(2))
    b = pu_learn.train_classifier(small_problem, FAST, Rng(2))
    assert pu_learn.classifier_to_bytes(a) == pu_learn.classifier_to_bytes(b)
    assert a.alpha_hat == b.alpha_hat
    assert 0 <= a.alpha_hat <= 1
    assert len(a.history) == FAST.epochs_warmup + FAST.epochs_main


def test_freeze_preserves_predictions(small_problem):
    state, _ = _state_and_view(small_problem)
    before = state.predict_proba(small_problem.unlabeled)
    state.freeze()
    after = state.predict_proba(small_problem.unlabeled)
    assert np.allclose(before, after, atol=1e-5)


def test_classifier_checkpoint_round_trip(small_problem, tmp_path):
    state = pu_learn.train_classifier(small_problem, FAST, Rng(0))
    blob = pu_learn.classifier_to_bytes(state)
    back = pu_learn.classifier_from_bytes(blob)
    assert pu_learn.classifier_to_bytes(back) == blob
    assert back.input_mode is state.input_mode
    assert np.array_equal(back.predict_proba(small_problem.unlabeled), state.predict_proba(small_problem.unlabeled))
    pu_learn.save_classifier(state, tmp_path / "c.bin")
    assert (tmp_path / "c.bin").read_bytes() == blob


def test_input_dims_per_mode(small_problem):
    rew = pu_learn.train_classifier(small_problem, ClassifierConfig(input_mode="reward", epochs_warmup=1,
                                                                    epochs_main=1), Rng(0))
    dyn = pu_learn.train_classifier(small_problem, FAST, Rng(0))
    assert rew.net.in_dim == 4 + 2 + 1
    assert dyn.net.in_dim == 2 * 4 + 2


def test_predict_rejects_wrong_dims(small_problem):
    from puorl.data import TransitionDataset
    state = pu_learn.train_classifier(small_problem, FAST, Rng(0))
    other = TransitionDataset(np.zeros((3, 5)), np.zeros((3, 2)), np.zeros(3), np.zeros((3, 5)), np.zeros(3))
    with pytest.raises(ModeError):
        state.predict_proba(other)


def test_reward_mode_on_reward_shift(rng):
    p = build_problem(envs.default_positive(), envs.SHIFTS["reward"](), ("ME", "ME"), 20000, 0.3, 0.03, Rng(3))
    state = pu_learn.train_classifier(p, ClassifierConfig(input_mode="reward", epochs_warmup=5, epochs_main=10), Rng(0))
    stats = pu_learn.evaluate_classifier(state, p)
    assert stats["accuracy"] >= 0.95
