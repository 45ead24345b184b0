"""Keep the unlabeled rows a frozen classifier calls positive, then merge with ``D_p``."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .data import concat, reveal_true_domains
from .errors import ModeError, ShapeError


@dataclass
class FilterReport:
    kept_count: int
    dropped_count: int
    precision: float
    recall: float
    decision_threshold: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def kept_indices(classifier, unlabeled, threshold=0.5):
    """Row indices of ``unlabeled`` with positive-probability >= threshold, ascending."""
    try:
        probs = np.asarray(classifier.predict_proba(unlabeled))
    except ShapeError as exc:
        raise ModeError(str(exc)) from exc
    if probs.shape != (unlabeled.count,):
        raise ModeError(f"classifier returned {probs.shape} scores for {unlabeled.count} rows")
    return np.flatnonzero(probs >= threshold)


def grade(unlabeled, kept, threshold):
    """Precision/recall of a kept index set against the hidden labels."""
    truth = reveal_true_domains(unlabeled) == 0
    n_kept = len(kept)
    tp = int(truth[kept].sum())
    n_pos = int(truth.sum())
    precision = tp / n_kept if n_kept else 1.0
    recall = tp / n_pos if n_pos else 1.0
    return FilterReport(n_kept, unlabeled.count - n_kept, float(precision), float(recall), float(threshold))


def filter_unlabeled(classifier, problem, threshold=0.5):
    """Return ``(D_u rows predicted positive, FilterReport)``; row order is preserved."""
    kept = kept_indices(classifier, problem.unlabeled, threshold)
    return problem.unlabeled.subset(kept), grade(problem.unlabeled, kept, threshold)


def augment(problem, filtered):
    """``D_p`` followed by the filtered rows, without deduplication."""
    if filtered.count == 0:
        return problem.positive
    if (filtered.state_dim, filtered.action_dim) != (problem.state_dim, problem.action_dim):
        raise ShapeError(f"filtered dims {(filtered.state_dim, filtered.action_dim)} != "
                         f"problem dims {(problem.state_dim, problem.action_dim)}")
    return concat(problem.positive, filtered)
