"""Assembling a positive / domain-unlabeled problem from domain specs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import envs
from ..errors import ConfigError, SplitError
from .dataset import TransitionDataset, concat

# dataset quality -> (policy, share of episodes)
QUALITIES = {
    "ME": ((envs.Quality.EXPERT, 0.5), (envs.Quality.MEDIUM, 0.5)),
    "M": ((envs.Quality.MEDIUM, 1.0),),
    "R": ((envs.Quality.RANDOM, 1.0),),
}


@dataclass(frozen=True)
class PuorlProblem:
    positive: TransitionDataset
    unlabeled: TransitionDataset
    labeled_ratio: float
    # evaluation-only
    alpha_p_true: float

    @property
    def n_p(self):
        return self.positive.count

    @property
    def n_u(self):
        return self.unlabeled.count

    @property
    def state_dim(self):
        return self.positive.state_dim

    @property
    def action_dim(self):
        return self.positive.action_dim


def sample_domain(spec, quality, count, rng, domain_id):
    """``count`` transitions drawn uniformly from whole episodes of ``quality``."""
    if quality not in QUALITIES:
        raise ConfigError(f"unknown quality {quality!r}; choose from {sorted(QUALITIES)}")
    if count == 0:
        return None
    n_eps = math.ceil(count / spec.horizon)
    parts = []
    remaining = n_eps
    mix = QUALITIES[quality]
    for i, (q, share) in enumerate(mix):
        k = remaining if i == len(mix) - 1 else math.ceil(n_eps * share)
        k = min(k, remaining)
        remaining -= k
        if k:
            cols = envs.rollout_arrays(spec, envs.behavior_policy(q), k, rng.child(q.value))
            parts.append(TransitionDataset.from_columns(cols, domain_id))
    pool = concat(*parts)
    order = rng.child("shuffle").gen.permutation(pool.count)[:count]
    return pool.subset(order)


def build_problem(positive_spec, mixture, qualities, total_count, alpha_p, labeled_ratio, rng):
    """Draw ``D_p`` and ``D_u``; ``qualities`` is ``(positive_quality, negative_quality)``."""
    if not 0 < labeled_ratio < alpha_p <= 1:
        raise ConfigError(f"need 0 < labeled_ratio < alpha_p <= 1, got {labeled_ratio}, {alpha_p}")
    if total_count < 1000:
        raise ConfigError(f"total_count must be >= 1000, got {total_count}")
    for neg in mixture.negative_domains:
        if not neg.same_task_as(positive_spec):
            raise ConfigError("negative domains must share goal, dt and horizon with the positive domain")
    pos_q, neg_q = qualities
    n_pos = int(round(alpha_p * total_count))
    n_p = int(round(labeled_ratio * total_count))
    n_neg = total_count - n_pos
    if n_p < 1:
        raise ConfigError("labeled_ratio leaves no labeled positives")

    pool = sample_domain(positive_spec, pos_q, n_pos, rng.child("positive"), 0)
    counts = rng.child("eta").gen.multinomial(n_neg, mixture.eta) if n_neg else [0] * len(mixture.eta)
    negs = [
        sample_domain(spec, neg_q, int(c), rng.child("negative", k), k + 1)
        for k, (spec, c) in enumerate(zip(mixture.negative_domains, counts))
    ]
    positive = pool.subset(np.arange(n_p))
    unlabeled = concat(pool.subset(np.arange(n_p, n_pos)), *negs)
    unlabeled = unlabeled.subset(rng.child("unlabeled").gen.permutation(unlabeled.count))
    alpha_u = (n_pos - n_p) / (total_count - n_p)
    return PuorlProblem(positive, unlabeled, labeled_ratio, alpha_u)


def split(dataset, fraction, rng):
    """Uniform random ``(train, holdout)`` split with ``round(fraction * n)`` train rows."""
    train_idx, hold_idx = split_indices(dataset.count, fraction, rng)
    return dataset.subset(train_idx), dataset.subset(hold_idx)


def split_indices(n, fraction, rng):
    if not 0 < fraction < 1:
        raise SplitError(f"fraction must be in (0, 1), got {fraction}")
    k = int(round(fraction * n))
    if k == 0 or k == n:
        raise SplitError(f"split of {n} rows at {fraction} leaves one side empty")
    perm = rng.gen.permutation(n)
    return perm[:k], perm[k:]
