"""Domain classifier trained from positive and domain-unlabeled transitions.

Training runs a short non-negative PU warm-up at a fixed prior, then
alternates best-bin mixture-proportion estimation on held-out rows with a
CVIR epoch: the ``alpha_hat`` most positive-looking unlabeled rows are set
aside and the rest are treated as negatives.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import nn_core
from .data import reveal_true_domains, split_indices
from .errors import (BatchError, DegenerateTrainingError, EstimationError, FormatError, ModeError,
                     TrainingDivergenceError)
from .losses import softplus
from .nn_core import Activation

CLIP = 1e-7


class InputMode(str, enum.Enum):
    DYNAMICS = "dynamics"  # (s, a, s')
    REWARD = "reward"  # (s, a, r)


MODE_TAGS = {InputMode.DYNAMICS: 0, InputMode.REWARD: 1}


def input_dim(mode, state_dim, action_dim):
    if InputMode(mode) is InputMode.DYNAMICS:
        return 2 * state_dim + action_dim
    return state_dim + action_dim + 1


def classifier_inputs(dataset, mode):
    if InputMode(mode) is InputMode.DYNAMICS:
        return np.concatenate([dataset.s, dataset.a, dataset.s_next], axis=1)
    return np.concatenate([dataset.s, dataset.a, dataset.r[:, None]], axis=1)


@dataclass
class ClassifierConfig:
    input_mode: InputMode = InputMode.DYNAMICS
    hidden: tuple = (64, 64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    epochs_warmup: int = 10
    epochs_main: int = 100
    warmup_alpha: float = 0.5
    holdout_fraction: float = 0.2
    bbe_c: float = 0.1
    bbe_delta: float = 0.1
    bbe_qp_floor: float = 0.1
    bbe_grid_step: float = 0.01

    def __post_init__(self):
        self.input_mode = InputMode(self.input_mode)
        self.hidden = tuple(self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["input_mode"] = self.input_mode.value
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ClassifierState:
    net: nn_core.Mlp
    input_mode: InputMode
    alpha_hat: float = 0.5
    epochs_warmup: int = 10
    epochs_main: int = 100
    batch_size: int = 256
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None
    adam: nn_core.AdamState = None
    history: list = field(default_factory=list)
    # row indices of D_u / D_p that were held out from training
    holdout_unlabeled: np.ndarray = None
    holdout_positive: np.ndarray = None

    def __post_init__(self):
        self.input_mode = InputMode(self.input_mode)
        d = self.net.in_dim
        if self.input_shift is None:
            self.input_shift = np.zeros(d, dtype=np.float32)
        if self.input_scale is None:
            self.input_scale = np.ones(d, dtype=np.float32)

    def normalize(self, x):
        return ((x - self.input_shift) / self.input_scale).astype(np.float32)

    def predict_proba(self, dataset):
        x = classifier_inputs(dataset, self.input_mode)
        if x.shape[1] != self.net.in_dim:
            raise ModeError(f"classifier expects {self.net.in_dim} inputs in {self.input_mode.value} mode, "
                            f"dataset provides {x.shape[1]}")
        return nn_core.forward(self.net, self.normalize(x))[:, 0]

    def freeze(self):
        """Fold input normalization into the first layer and drop optimizer state."""
        w = self.net.weights[0].astype(np.float64)
        b = self.net.biases[0].astype(np.float64)
        scale = self.input_scale.astype(np.float64)
        shift = self.input_shift.astype(np.float64)
        self.net.weights[0] = (w / scale[:, None]).astype(np.float32)
        self.net.biases[0] = (b - (shift / scale) @ w).astype(np.float32)
        self.input_shift = np.zeros_like(self.input_shift)
        self.input_scale = np.ones_like(self.input_scale)
        self.adam = None
        return self


# --------------------------------------------------------------------- risks

class PuRisk(NamedTuple):
    value: float
    grad_p: np.ndarray  # d risk / d logit for positive rows
    grad_u: np.ndarray


def _check_sides(probs_p, probs_u):
    probs_p = np.asarray(probs_p, dtype=np.float64)
    probs_u = np.asarray(probs_u, dtype=np.float64)
    if probs_p.size == 0 or probs_u.size == 0:
        raise BatchError("positive and unlabeled batches must both be nonempty")
    return probs_p, probs_u


def nnpu_risk(probs_p, probs_u, alpha_p):
    """Non-negative PU risk with the logistic surrogate.

    ``alpha * R_p^+ + max(0, R_u^- - alpha * R_p^-)``; the gradient skips the
    negative-class term whenever the bracket is not positive.
    """
    if not 0 <= alpha_p <= 1:
        raise ValueError(f"alpha_p must lie in [0, 1], got {alpha_p}")
    probs_p, probs_u = _check_sides(probs_p, probs_u)
    pp = np.clip(probs_p, CLIP, 1 - CLIP)
    pu = np.clip(probs_u, CLIP, 1 - CLIP)
    r_p_pos = np.mean(-np.log(pp))
    r_p_neg = np.mean(-np.log1p(-pp))
    r_u_neg = np.mean(-np.log1p(-pu))
    neg = r_u_neg - alpha_p * r_p_neg
    n_p, n_u = pp.size, pu.size
    # d(-log p)/dz = p - 1 ; d(-log(1-p))/dz = p
    grad_p = alpha_p * (pp - 1) / n_p
    grad_u = np.zeros_like(pu)
    if neg > 0:
        grad_p = grad_p - alpha_p * pp / n_p
        grad_u = pu / n_u
    return PuRisk(float(alpha_p * r_p_pos + max(0.0, neg)), grad_p, grad_u)


def pn_risk(probs_p, probs_n):
    """Balanced logistic risk with positives as +1 and the other side as -1."""
    probs_p, probs_n = _check_sides(probs_p, probs_n)
    pp = np.clip(probs_p, CLIP, 1 - CLIP)
    pn = np.clip(probs_n, CLIP, 1 - CLIP)
    value = 0.5 * (np.mean(-np.log(pp)) + np.mean(-np.log1p(-pn)))
    return PuRisk(float(value), 0.5 * (pp - 1) / pp.size, 0.5 * pn / pn.size)


def cvir_keep_mask(probs_u, alpha_hat):
    """Drop the ``round(alpha_hat * n)`` highest-probability rows.

    Ties are resolved toward the lowest row index being dropped first.
    """
    if alpha_hat >= 1:
        raise DegenerateTrainingError("alpha_hat >= 1 would discard every unlabeled row")
    probs_u = np.asarray(probs_u)
    n = probs_u.size
    n_drop = int(round(max(alpha_hat, 0.0) * n))
    if n_drop >= n:
        raise DegenerateTrainingError("CVIR would discard every unlabeled row")
    order = np.argsort(-probs_u, kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:n_drop]] = False
    return keep


# ----------------------------------------------------------------------- bbe

def bbe_from_probs(probs_p, probs_u, c=0.1, delta=0.1, qp_floor=0.1, grid_step=0.01):
    probs_p = np.asarray(probs_p, dtype=np.float64)
    probs_u = np.asarray(probs_u, dtype=np.float64)
    if probs_p.size == 0 or probs_u.size == 0:
        raise EstimationError("BBE needs nonempty positive and unlabeled holdouts")
    grid = np.arange(1, int(round(1 / grid_step))) * grid_step
    q_p = (probs_p[None, :] >= grid[:, None]).mean(axis=1)
    q_u = (probs_u[None, :] >= grid[:, None]).mean(axis=1)
    valid = q_p >= qp_floor
    if not valid.any():
        raise EstimationError("no threshold leaves enough positive mass; classifier collapsed")
    penalty = c * np.sqrt(np.log(1.0 / delta) / probs_u.size)
    cand = (q_u[valid] + penalty) / q_p[valid]
    return float(np.clip(cand.min(), 0.0, 1.0))


def bbe_estimate(state, positive_holdout, unlabeled_holdout, config=None):
    """Mixture-proportion estimate from held-out datasets."""
    config = config or ClassifierConfig()
    return bbe_from_probs(state.predict_proba(positive_holdout), state.predict_proba(unlabeled_holdout),
                          config.bbe_c, config.bbe_delta, config.bbe_qp_floor, config.bbe_grid_step)


# ------------------------------------------------------------------ training

@dataclass
class PuBatchView:
    """Normalized training inputs plus the CVIR keep mask over unlabeled rows."""

    positive_inputs: np.ndarray
    unlabeled_inputs: np.ndarray
    keep: np.ndarray = None

    def __post_init__(self):
        if self.keep is None:
            self.keep = np.ones(len(self.unlabeled_inputs), dtype=bool)


def _probs(state, x):
    return nn_core.forward(state.net, x)[:, 0]


def _epoch(state, view, rng, risk_fn, epoch):
    """One pass over the kept unlabeled rows and over the positives.

    Both sides are split into the same number of minibatches, so every
    positive row is visited once per epoch; ``risk_fn`` weights the two
    sides equally regardless of their sizes.
    """
    gen = rng.gen
    u_rows = np.flatnonzero(view.keep)
    if u_rows.size == 0:
        raise DegenerateTrainingError("no unlabeled rows left to train on")
    u_rows = u_rows[gen.permutation(u_rows.size)]
    n_p = len(view.positive_inputs)
    n_batches = max(1, -(-u_rows.size // state.batch_size))
    u_parts = np.array_split(u_rows, n_batches)
    p_parts = np.array_split(gen.permutation(n_p), min(n_batches, n_p))
    params = state.net.parameters()
    losses = []
    for b, ub in enumerate(u_parts):
        pb = p_parts[b % len(p_parts)]
        x = np.concatenate([view.positive_inputs[pb], view.unlabeled_inputs[ub]])
        out, cache = nn_core.forward(state.net, x, return_cache=True)
        risk = risk_fn(out[: len(pb), 0], out[len(pb):, 0])
        if not np.isfinite(risk.value):
            raise TrainingDivergenceError(f"non-finite PU loss in epoch {epoch}", step=epoch)
        g = np.concatenate([risk.grad_p, risk.grad_u])[:, None]
        grads = nn_core.backward(state.net, x, g, cache=cache, wrt="logits")
        nn_core.adam_step(params, grads.named(), state.adam)
        losses.append(risk.value)
    return float(np.mean(losses))


def nnpu_epoch(state, view, rng, alpha_p, epoch=0):
    return _epoch(state, view, rng, lambda pp, pu: nnpu_risk(pp, pu, alpha_p), epoch)


def cvir_epoch(state, view, rng, epoch=0):
    """Re-rank unlabeled rows, mask the top ``alpha_hat`` share, train one PN epoch."""
    view.keep = cvir_keep_mask(_probs(state, view.unlabeled_inputs), state.alpha_hat)
    loss = _epoch(state, view, rng, pn_risk, epoch)
    return state, loss


def new_classifier(state_dim, action_dim, config, rng, shift=None, scale=None):
    d = input_dim(config.input_mode, state_dim, action_dim)
    net = nn_core.init_mlp([d, *config.hidden, 1], rng, Activation.RELU, Activation.SIGMOID)
    state = ClassifierState(net, config.input_mode, config.warmup_alpha, config.epochs_warmup,
                            config.epochs_main, config.batch_size, shift, scale)
    state.adam = nn_core.adam_init(net.parameters(), config.lr)
    return state


def train_classifier(problem, config=None, rng=None):
    """Warm-up with nnPU, then alternate BBE and CVIR; returns a frozen state."""
    config = config or ClassifierConfig()
    rng = rng or nn_core.Rng(0)
    mode = config.input_mode
    xp = classifier_inputs(problem.positive, mode)
    xu = classifier_inputs(problem.unlabeled, mode)
    p_tr, p_ho = split_indices(len(xp), 1 - config.holdout_fraction, rng.child("split", "p"))
    u_tr, u_ho = split_indices(len(xu), 1 - config.holdout_fraction, rng.child("split", "u"))
    both = np.concatenate([xp[p_tr], xu[u_tr]]).astype(np.float64)
    shift = both.mean(axis=0).astype(np.float32)
    scale = (both.std(axis=0) + 1e-6).astype(np.float32)

    state = new_classifier(problem.state_dim, problem.action_dim, config, rng.child("init"), shift, scale)
    state.holdout_positive, state.holdout_unlabeled = np.sort(p_ho), np.sort(u_ho)
    view = PuBatchView(state.normalize(xp[p_tr]), state.normalize(xu[u_tr]))
    hold_p, hold_u = state.normalize(xp[p_ho]), state.normalize(xu[u_ho])
    bbe = dict(c=config.bbe_c, delta=config.bbe_delta, qp_floor=config.bbe_qp_floor,
               grid_step=config.bbe_grid_step)

    for ep in range(config.epochs_warmup):
        loss = nnpu_epoch(state, view, rng.child("warmup", ep), config.warmup_alpha, ep)
        state.history.append({"epoch": ep, "phase": "warmup", "loss": loss, "alpha_hat": config.warmup_alpha})
    for it in range(config.epochs_main):
        ep = config.epochs_warmup + it
        state.alpha_hat = bbe_from_probs(_probs(state, hold_p), _probs(state, hold_u), **bbe)
        _, loss = cvir_epoch(state, view, rng.child("main", it), ep)
        state.history.append({"epoch": ep, "phase": "cvir", "loss": loss, "alpha_hat": state.alpha_hat})
    if config.epochs_main:
        state.alpha_hat = bbe_from_probs(_probs(state, hold_p), _probs(state, hold_u), **bbe)
    return state.freeze()


def evaluate_classifier(state, problem, threshold=0.5):
    """Holdout accuracy against hidden labels (evaluation only)."""
    idx = state.holdout_unlabeled if state.holdout_unlabeled is not None else np.arange(problem.n_u)
    held = problem.unlabeled.subset(idx)
    pred = state.predict_proba(held) >= threshold
    truth = reveal_true_domains(held) == 0
    hp = problem.positive.subset(state.holdout_positive) if state.holdout_positive is not None else problem.positive
    return {
        "accuracy": float(np.mean(pred == truth)),
        "positive_recall": float(np.mean(state.predict_proba(hp) >= threshold)),
        "alpha_hat": float(state.alpha_hat),
        "alpha_true": float(problem.alpha_p_true),
    }


# --------------------------------------------------------------- checkpoints

def classifier_to_bytes(state):
    if np.any(state.input_shift != 0) or np.any(state.input_scale != 1):
        state = ClassifierState(state.net.copy(), state.input_mode, state.alpha_hat,
                                input_shift=state.input_shift, input_scale=state.input_scale).freeze()
    return (nn_core.mlp_to_bytes(state.net) + struct.pack("<B", MODE_TAGS[state.input_mode])
            + struct.pack("<f", state.alpha_hat))


def classifier_from_bytes(data):
    fh = io.BytesIO(data)
    net = nn_core.read_mlp(fh, Activation.RELU, Activation.SIGMOID)
    tail = fh.read()
    if len(tail) != 5:
        raise FormatError(f"classifier trailer must be 5 bytes, got {len(tail)}")
    tag, alpha = struct.unpack("<Bf", tail)
    modes = {v: k for k, v in MODE_TAGS.items()}
    if tag not in modes:
        raise FormatError(f"unknown input mode tag {tag}")
    return ClassifierState(net, modes[tag], float(alpha))


def save_classifier(state, path):
    from .data.dataset import atomic_write
    atomic_write(path, classifier_to_bytes(state))


def load_classifier(path):
    with open(path, "rb") as fh:
        return classifier_from_bytes(fh.read())
