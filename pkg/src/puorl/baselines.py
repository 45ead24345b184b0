"""Comparison arms: dataset selectors, DARA reward rewriting and IGDF batch filtering.

For the two domain-adaptation baselines the labeled positives play the
target domain and the whole unlabeled set plays the source domain.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import nn_core
from .data import concat, reveal_true_domains
from .errors import DataError, TrainingDivergenceError
from .losses import info_nce, softmax_cross_entropy
from .nn_core import Activation, adam_init, adam_step, backward, forward, init_mlp

SOURCE, TARGET = 0, 1


class Arm(str, enum.Enum):
    OLP = "OLP"
    SHARING_ALL = "SharingAll"
    DARA = "DARA"
    IGDF = "IGDF"
    OURS = "Ours"
    ORACLE = "Oracle"


FEASIBLE = (Arm.OLP, Arm.SHARING_ALL, Arm.DARA, Arm.IGDF, Arm.OURS)


def select_dataset(arm, problem):
    arm = Arm(arm)
    if arm is Arm.OLP:
        return problem.positive
    if arm is Arm.SHARING_ALL:
        return concat(problem.positive, problem.unlabeled)
    if arm is Arm.ORACLE:
        # privileged: reads hidden labels
        true_pos = np.flatnonzero(reveal_true_domains(problem.unlabeled) == 0)
        return concat(problem.positive, problem.unlabeled.subset(true_pos))
    raise ValueError(f"{arm.value} is not a dataset-selection arm")


class _Standardizer:
    def __init__(self, x):
        x = x.astype(np.float64)
        self.shift = x.mean(axis=0).astype(np.float32)
        self.scale = (x.std(axis=0) + 1e-6).astype(np.float32)

    def __call__(self, x):
        return ((x - self.shift) / self.scale).astype(np.float32)


def _sas(ds):
    return np.concatenate([ds.s, ds.a, ds.s_next], axis=1)


def _sa(ds):
    return np.concatenate([ds.s, ds.a], axis=1)


# ---------------------------------------------------------------------- DARA

@dataclass
class DaraConfig:
    eta: float = 0.1
    steps: int = 5000
    batch_size: int = 256
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    prob_clip: float = 1e-4
    # Gaussian noise on standardized classifier inputs (DARC-style regularizer)
    input_noise: float = 1.0


@dataclass
class DaraClassifiers:
    q_sas: nn_core.Mlp
    q_sa: nn_core.Mlp
    eta: float = 0.1
    norm_sas: object = None
    norm_sa: object = None
    prob_clip: float = 1e-4

    def probs_sas(self, ds):
        return _softmax(forward(self.q_sas, self.norm_sas(_sas(ds)) if self.norm_sas else _sas(ds)))

    def probs_sa(self, ds):
        return _softmax(forward(self.q_sa, self.norm_sa(_sa(ds)) if self.norm_sa else _sa(ds)))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dara_delta_r(classifiers, ds):
    """``log q_sas(src)/q_sas(tgt) + log q_sa(src)/q_sa(tgt)`` with clipped probabilities."""
    lo, hi = classifiers.prob_clip, 1 - classifiers.prob_clip
    p_sas = np.clip(classifiers.probs_sas(ds).astype(np.float64), lo, hi)
    p_sa = np.clip(classifiers.probs_sa(ds).astype(np.float64), lo, hi)
    return (np.log(p_sas[:, SOURCE] / p_sas[:, TARGET]) + np.log(p_sa[:, SOURCE] / p_sa[:, TARGET]))


def _train_domain_net(net, x_tgt, x_src, steps, batch_size, lr, rng, name, input_noise=0.0):
    opt = adam_init(net.parameters(), lr)
    half = batch_size // 2
    gen = rng.gen
    labels = np.concatenate([np.full(half, TARGET), np.full(batch_size - half, SOURCE)])
    for step in range(steps):
        it = gen.integers(0, len(x_tgt), size=half)
        is_ = gen.integers(0, len(x_src), size=batch_size - half)
        x = np.concatenate([x_tgt[it], x_src[is_]])
        if input_noise:
            x = x + (input_noise * gen.normal(size=x.shape)).astype(x.dtype)
        out, cache = forward(net, x, return_cache=True)
        loss, g = softmax_cross_entropy(out, labels)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"{name} diverged at step {step}", step=step)
        adam_step(net.parameters(), backward(net, x, g, cache=cache).named(), opt)
    return net


def train_dara_classifiers(problem, rng, config=None):
    config = config or DaraConfig()
    tgt, src = problem.positive, problem.unlabeled
    norm_sas = _Standardizer(np.concatenate([_sas(tgt), _sas(src)]))
    norm_sa = _Standardizer(np.concatenate([_sa(tgt), _sa(src)]))
    h = list(config.hidden)
    q_sas = init_mlp([norm_sas.shift.size, *h, 2], rng.child("q_sas", "init"))
    q_sa = init_mlp([norm_sa.shift.size, *h, 2], rng.child("q_sa", "init"))
    _train_domain_net(q_sas, norm_sas(_sas(tgt)), norm_sas(_sas(src)), config.steps, config.batch_size,
                      config.lr, rng.child("q_sas", "train"), "q_sas", config.input_noise)
    _train_domain_net(q_sa, norm_sa(_sa(tgt)), norm_sa(_sa(src)), config.steps, config.batch_size,
                      config.lr, rng.child("q_sa", "train"), "q_sa", config.input_noise)
    return DaraClassifiers(q_sas, q_sa, config.eta, norm_sas, norm_sa, config.prob_clip)


def dara_rewrite(classifiers, problem):
    """``D_p`` untouched, followed by ``D_u`` with ``r <- r - eta * delta_r``."""
    src = problem.unlabeled
    delta = dara_delta_r(classifiers, src)
    return concat(problem.positive, src.with_rewards(src.r.astype(np.float64) - classifiers.eta * delta))


def dara_augment(problem, rng, config=None):
    return dara_rewrite(train_dara_classifiers(problem, rng, config), problem)


# ---------------------------------------------------------------------- IGDF

@dataclass
class IgdfConfig:
    xi: float = 0.75
    rep_dim: int = 64
    hidden: tuple = (64, 64)
    encoder_steps: int = 7000
    batch_size: int = 256
    lr: float = 1e-3


@dataclass
class IgdfEncoders:
    phi: nn_core.Mlp
    psi: nn_core.Mlp
    xi: float = 0.75
    batch_size: int = 256
    encoder_steps: int = 7000
    norm_sa: object = None
    norm_s: object = None

    def embed_sa(self, ds):
        return forward(self.phi, self.norm_sa(_sa(ds)))

    def embed_next(self, ds):
        return forward(self.psi, self.norm_s(ds.s_next))


def igdf_log_h(encoders, ds):
    """``phi(s, a) . psi(s')``, the log of the IGDF score."""
    return np.sum(encoders.embed_sa(ds).astype(np.float64) * encoders.embed_next(ds), axis=1)


def igdf_h(encoders, ds):
    with np.errstate(over="ignore"):
        return np.exp(igdf_log_h(encoders, ds))


def diagonal_accuracy(encoders, target_batch):
    """Share of rows whose own next state scores highest among the batch's next states."""
    scores = encoders.embed_sa(target_batch) @ encoders.embed_next(target_batch).T
    return float(np.mean(np.argmax(scores, axis=1) == np.arange(len(scores))))


def new_encoders(sa_dim, s_dim, config, rng, norm_sa, norm_s):
    h = list(config.hidden)
    phi = init_mlp([sa_dim, *h, config.rep_dim], rng.child("phi"))
    psi = init_mlp([s_dim, *h, config.rep_dim], rng.child("psi"))
    return IgdfEncoders(phi, psi, config.xi, config.batch_size, config.encoder_steps, norm_sa, norm_s)


def igdf_train_encoders(problem, rng, config=None):
    """InfoNCE over target triples; source next states are extra negative columns."""
    config = config or IgdfConfig()
    tgt, src = problem.positive, problem.unlabeled
    norm_sa = _Standardizer(np.concatenate([_sa(tgt), _sa(src)]))
    norm_s = _Standardizer(np.concatenate([tgt.s_next, src.s_next]))
    enc = new_encoders(norm_sa.shift.size, norm_s.shift.size, config, rng.child("init"), norm_sa, norm_s)
    x_sa, x_next, x_src_next = norm_sa(_sa(tgt)), norm_s(tgt.s_next), norm_s(src.s_next)
    phi_opt = adam_init(enc.phi.parameters(), config.lr)
    psi_opt = adam_init(enc.psi.parameters(), config.lr)
    gen = rng.child("train").gen
    b = config.batch_size
    for step in range(config.encoder_steps):
        it = gen.choice(len(x_sa), size=min(b, len(x_sa)), replace=False)
        is_ = gen.integers(0, len(x_src_next), size=b)
        anchors_in, cand_in = x_sa[it], np.concatenate([x_next[it], x_src_next[is_]])
        a, ca = forward(enc.phi, anchors_in, return_cache=True)
        c, cc = forward(enc.psi, cand_in, return_cache=True)
        loss, da, dc = info_nce(a, c)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"IGDF encoders diverged at step {step}", step=step)
        adam_step(enc.phi.parameters(), backward(enc.phi, anchors_in, da, cache=ca).named(), phi_opt)
        adam_step(enc.psi.parameters(), backward(enc.psi, cand_in, dc, cache=cc).named(), psi_opt)
    return enc


def top_indices(scores, keep):
    """Indices of the ``keep`` largest scores; ties favor the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:keep])


def candidate_pool_size(batch_size, xi):
    half = batch_size // 2
    return math.ceil(half / xi)


def igdf_filtered_batch(encoders, source, target, batch_size, rng, xi=None):
    """``B/2`` top-scored source rows out of ``ceil((B/2)/xi)`` candidates, plus ``B/2`` target rows."""
    if batch_size % 2:
        raise DataError("IGDF batch size must be even")
    xi = encoders.xi if xi is None else xi
    half = batch_size // 2
    n_cand = candidate_pool_size(batch_size, xi)
    if source.count < n_cand:
        raise DataError(f"source has {source.count} rows, candidate pool needs {n_cand}")
    gen = rng.gen
    cand = source.subset(gen.choice(source.count, size=n_cand, replace=False))
    kept = cand.subset(top_indices(igdf_log_h(encoders, cand), min(half, n_cand)))
    tgt = target.subset(gen.integers(0, target.count, size=half))
    return concat(kept, tgt)


def igdf_batch_provider(encoders, problem, batch_size):
    def provide(step, rng):
        return igdf_filtered_batch(encoders, problem.unlabeled, problem.positive, batch_size, rng)
    return provide
