"""Scalar losses with their gradients w.r.t. the network outputs.

Each function returns ``(value, grad)``; values are float64 means, grads
match the dtype of the primary input.
"""

import numpy as np

from .nn_core import sigmoid


def mse(pred, target):
    diff = pred - target
    value = float(np.mean(np.square(diff, dtype=np.float64)))
    return value, (2.0 / diff.size) * diff


def softplus(z):
    return np.logaddexp(0.0, z)


def bce_with_logits(logits, labels):
    """Mean logistic loss; labels in {0, 1}."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    value = float(np.mean(softplus(z.astype(np.float64)) - y * z, dtype=np.float64))
    return value, (sigmoid(z) - y) / z.size


def expectile_loss(residual, expectile):
    """``mean(|expectile - 1[u < 0]| * u**2)`` with ``u = residual``."""
    u = np.asarray(residual)
    weight = np.where(u < 0, 1.0 - expectile, expectile).astype(u.dtype)
    value = float(np.mean(weight * np.square(u, dtype=np.float64), dtype=np.float64))
    return value, 2.0 * weight * u / u.size


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    logp = log_softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    value = float(-np.mean(logp[idx, labels], dtype=np.float64))
    grad = np.exp(logp)
    grad[idx, labels] -= 1
    return value, grad / n


def info_nce(anchors, candidates):
    """InfoNCE where row ``i`` of ``anchors`` matches row ``i`` of ``candidates``.

    ``candidates`` may carry extra rows past ``len(anchors)``; those act as
    negatives for every anchor. Returns ``(value, d_anchors, d_candidates)``.
    """
    n = anchors.shape[0]
    if candidates.shape[0] < n:
        raise ValueError("need at least as many candidates as anchors")
    scores = anchors @ candidates.T
    value, d_scores = softmax_cross_entropy(scores, np.arange(n))
    return value, d_scores @ candidates, d_scores.T @ anchors
