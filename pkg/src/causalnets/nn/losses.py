"""Batch-mean losses returning ``(value, gradient w.r.t. predictions)``."""

from __future__ import annotations

import numpy as np

from .layers import sigmoid

BCE_EPS = 1e-7


def loss(kind: str, predictions, labels):
    p = np.asarray(predictions, float)
    y = np.asarray(labels, float)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    n = p.size
    if kind == "mse":
        diff = p - y
        return float(np.mean(diff * diff)), 2.0 * diff / n
    if kind == "bce":
        # the clip has zero slope outside [eps, 1 - eps]
        inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
        pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        value = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / n
        return float(value), grad
    raise ValueError(f"unknown loss {kind!r}")


def bce_with_logits(logits, labels):
    """Binary cross-entropy of ``sigmoid(logits)``, gradient w.r.t. the logits.

    Numerically stable for saturated logits, where the clipped probability
    form would stop passing gradient.
    """
    z = np.asarray(logits, float)
    y = np.asarray(labels, float)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    value = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(value), (sigmoid(z) - y) / z.size
