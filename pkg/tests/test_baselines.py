import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from puorl import baselines, envs
from puorl.baselines import Arm, DaraConfig, IgdfConfig
from puorl.data import TransitionDataset, build_problem, concat, reveal_true_domains
from puorl.errors import DataError
from puorl.nn_core import Rng


class FixedDara(baselines.DaraClassifiers):
    """Classifier pair with prescribed (source, target) probabilities."""

    def __init__(self, sas, sa, eta=0.1):
        super().__init__(None, None, eta)
        self._sas, self._sa = np.asarray(sas, float), np.asarray(sa, float)

    def probs_sas(self, ds):
        return np.tile(self._sas, (ds.count, 1))

    def probs_sa(self, ds):
        return np.tile(self._sa, (ds.count, 1))


class ScoreEncoders(baselines.IgdfEncoders):
    """log h(s, a, s') equals the row's reward."""

    def __init__(self, xi=0.75):
        super().__init__(None, None, xi)

    def embed_sa(self, ds):
        return ds.r[:, None].astype(np.float64)

    def embed_next(self, ds):
        return np.ones((ds.count, 1))


def rows(scores, domain=1):
    n = len(scores)
    g = np.random.default_rng(n)
    return TransitionDataset(g.normal(size=(n, 4)), g.uniform(-1, 1, (n, 2)), scores, g.normal(size=(n, 4)),
                             np.zeros(n), np.full(n, domain))


def test_selector_counts(small_problem):
    p = small_problem
    n_true = int((reveal_true_domains(p.unlabeled) == 0).sum())
    assert baselines.select_dataset(Arm.OLP, p).count == p.n_p
    assert baselines.select_dataset(Arm.SHARING_ALL, p).count == p.n_p + p.n_u
    oracle = baselines.select_dataset(Arm.ORACLE, p)
    assert oracle.count == p.n_p + n_true
    assert np.all(reveal_true_domains(oracle) == 0)
    with pytest.raises(ValueError):
        baselines.select_dataset(Arm.DARA, p)


def test_dara_balanced_classifiers_leave_rewards(small_problem):
    out = baselines.dara_rewrite(FixedDara([0.5, 0.5], [0.5, 0.5]), small_problem)
    assert out == concat(small_problem.positive, small_problem.unlabeled)
    assert not baselines.dara_delta_r(FixedDara([0.5, 0.5], [0.5, 0.5]), small_problem.unlabeled).any()


def test_dara_log_nine(small_problem):
    src_col = baselines.SOURCE
    sas = [0.9, 0.1] if src_col == 0 else [0.1, 0.9]
    clf = FixedDara(sas, [0.5, 0.5])
    delta = baselines.dara_delta_r(clf, small_problem.unlabeled)
    assert np.allclose(delta, math.log(9))
    out = baselines.dara_rewrite(clf, small_problem)
    drop = small_problem.unlabeled.r.astype(np.float64) - out.r[small_problem.n_p:]
    assert np.allclose(drop, 0.1 * math.log(9), atol=1e-6)
    assert 0.1 * math.log(9) == pytest.approx(0.2197, abs=1e-4)


def test_dara_clips_probabilities(small_problem):
    clf = FixedDara([1.0, 0.0], [0.5, 0.5]) if baselines.SOURCE == 0 else FixedDara([0.0, 1.0], [0.5, 0.5])
    delta = baselines.dara_delta_r(clf, small_problem.unlabeled)
    assert np.allclose(delta, math.log((1 - 1e-4) / 1e-4))


def test_dara_augment_shape_and_target_untouched(small_problem):
    out = baselines.dara_augment(small_problem, Rng(0), DaraConfig(steps=20))
    assert out.count == small_problem.n_p + small_problem.n_u
    assert out.subset(np.arange(small_problem.n_p)) == small_problem.positive
    assert np.array_equal(out.s[small_problem.n_p:], small_problem.unlabeled.s)


def test_dara_classifiers_output_distributions(small_problem):
    clf = baselines.train_dara_classifiers(small_problem, Rng(0), DaraConfig(steps=10))
    for probs in (clf.probs_sas(small_problem.unlabeled), clf.probs_sa(small_problem.unlabeled)):
        assert probs.shape == (small_problem.n_u, 2)
        assert np.allclose(probs.sum(axis=1), 1.0)


def test_igdf_xi_one_keeps_all_candidates():
    src = rows(np.arange(8.0))
    tgt = rows(np.zeros(20), domain=0)
    b = baselines.igdf_filtered_batch(ScoreEncoders(1.0), src, tgt, 16, Rng(0))
    assert baselines.candidate_pool_size(16, 1.0) == 8
    assert sorted(b.r[:8]) == list(np.arange(8.0))


def test_igdf_keeps_top_six_of_eight():
    scores = np.array([0.3, -1.2, 2.5, 0.9, 0.0, 1.7, -0.4, 1.1], np.float32)
    assert baselines.candidate_pool_size(12, 0.75) == 8
    oracle = set(np.argsort(-scores)[:6])
    assert set(baselines.top_indices(scores, 6)) == oracle
    src, tgt = rows(scores), rows(np.full(30, 9.0), domain=0)
    b = baselines.igdf_filtered_batch(ScoreEncoders(0.75), src, tgt, 12, Rng(0))
    assert b.count == 12
    assert sorted(b.r[:6]) == sorted(scores[list(oracle)])
    assert np.all(b.r[6:] == 9.0)  # all B/2 target rows present
    assert np.all(reveal_true_domains(b)[6:] == 0)


def test_igdf_pool_errors():
    with pytest.raises(DataError):
        baselines.igdf_filtered_batch(ScoreEncoders(), rows(np.arange(5.0)), rows(np.zeros(10)), 12, Rng(0))
    with pytest.raises(DataError):
        baselines.igdf_filtered_batch(ScoreEncoders(), rows(np.arange(50.0)), rows(np.zeros(10)), 11, Rng(0))


def test_top_indices_ties_lowest_index():
    assert list(baselines.top_indices([1.0, 2.0, 2.0, 2.0, 0.0], 2)) == [1, 2]


@settings(max_examples=60, deadline=None)
@given(scores=st.lists(st.floats(-50, 50), min_size=2, max_size=30, unique=True), data=st.data())
def test_top_indices_permutation_invariant(scores, data):
    scores = np.asarray(scores)
    keep = data.draw(st.integers(1, len(scores)))
    perm = np.asarray(data.draw(st.permutations(range(len(scores)))))
    a = set(scores[baselines.top_indices(scores, keep)])
    b = set(scores[perm][baselines.top_indices(scores[perm], keep)])
    assert a == b == set(np.sort(scores)[::-1][:keep])


def test_igdf_h_positive(small_problem):
    enc = baselines.igdf_train_encoders(small_problem, Rng(0), IgdfConfig(encoder_steps=2))
    assert np.all(baselines.igdf_h(enc, small_problem.unlabeled) > 0)
    assert enc.phi.out_dim == enc.psi.out_dim == 64


def test_untrained_encoders_at_chance(small_problem):
    enc = baselines.igdf_train_encoders(small_problem, Rng(0), IgdfConfig(encoder_steps=0))
    accs = [baselines.diagonal_accuracy(enc, small_problem.positive.subset(np.arange(i, i + 100)))
            for i in range(0, 300, 100)]
    assert np.mean(accs) < 3 / 100


def test_batch_provider_feeds_trainer(small_problem):
    from puorl import offline_rl
    enc = baselines.igdf_train_encoders(small_problem, Rng(0), IgdfConfig(encoder_steps=2))
    provider = baselines.igdf_batch_provider(enc, small_problem, 64)
    batch = provider(1, Rng(1))
    assert batch.count == 64
    cfg = offline_rl.Td3BcConfig(hidden=(16, 16), batch_size=64)
    agent, curves = offline_rl.train("td3bc", concat(small_problem.positive, small_problem.unlabeled), 4,
                                     Rng(0), cfg, batch_provider=provider, log_interval=2)
    assert curves.steps == [2, 4]
