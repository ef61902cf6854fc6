"""Ordinal-weighted binary cross-entropy over the softmaxed relation scores."""

from __future__ import annotations

import numpy as np

from .relation import softmax

P_CLAMP = 1e-12


def class_weights(target: int, n_classes: int = 11, weighted: bool = True) -> np.ndarray:
    """|target - c| + 1 for every class level c (all ones when unweighted)."""
    if not weighted:
        return np.ones(n_classes)
    return np.abs(target - np.arange(n_classes)) + 1.0


def wbce_loss(p: np.ndarray, target: int, weighted: bool = True):
    """Loss and its gradient with respect to the pre-softmax scores.

    ``p`` must be the softmax of the relation scores; the gradient is
    propagated back through the softmax coupling. Probabilities are clamped
    to [1e-12, 1 - 1e-12] before the logarithms (zero gradient where clamped).
    """
    p = np.asarray(p, dtype=np.float64)
    C = p.size
    if not 0 <= target < C:
        raise ValueError(f"target {target} outside [0, {C - 1}]")
    y = np.zeros(C)
    y[target] = 1.0
    w = class_weights(target, C, weighted)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    bce = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = float(np.sum(w * bce) / C)
    dp = (w / C) * (-y / pc + (1.0 - y) / (1.0 - pc))
    dp = np.where((p > P_CLAMP) & (p < 1.0 - P_CLAMP), dp, 0.0)
    dr = p * (dp - np.dot(p, dp))
    return loss, dr


class LossHead:
    """softmax + (weighted) BCE as a layer over the score vector, for gradient checks."""

    params: list = []

    def __init__(self, target: int, weighted: bool = True):
        self.target = target
        self.weighted = weighted

    def forward(self, r):
        loss, dr = wbce_loss(softmax(r), self.target, self.weighted)
        return np.array(loss), dr

    def backward(self, dr, dloss):
        return dr * float(dloss)
