"""Finite-difference checks for every differentiable layer in the model.

Each layer is wrapped in a small adapter with the ``forward(x) -> (y, cache)``
and ``backward(cache, dy) -> dx`` contract that :func:`fd_check` expects.
Inputs are redrawn when they fall too close to a non-differentiable point
(ReLU hinges, ties between order statistics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import CheckReport, ModelParams, fd_check
from .embedding import GRU, STAT_OPERATORS, BatchNorm, StackedGRUSummarizer, StatisticalLayer
from .loss import LossHead
from .relation import COMPARISONS, Comparison, RelationMLP

# order statistics must be separated by more than two finite-difference steps
KINK_MARGIN = 1e-4


def _jitter(params, rng, scale=0.3):
    """Move parameters off their structured init (zero biases, unit gammas)."""
    for p in params:
        p.values += rng.normal(0.0, scale, p.values.shape)


class _GRUCheck:
    def __init__(self, rng):
        reg = ModelParams()
        self.gru = GRU(reg, "gru", 4, 3, rng)
        _jitter(reg.trainable(), rng, 0.2)
        self.params = reg.trainable()

    def sample(self, rng):
        return rng.normal(0.0, 1.0, (2, 5, 4))

    def forward(self, x):
        return self.gru.forward(x)

    def backward(self, cache, dy):
        return self.gru.backward(cache, dy)


class _StackedGRUCheck(_GRUCheck):
    def __init__(self, rng):
        reg = ModelParams()
        self.gru = StackedGRUSummarizer(reg, "gru2", 3, 3, rng)
        _jitter(reg.trainable(), rng, 0.2)
        self.params = reg.trainable()

    def sample(self, rng):
        return rng.normal(0.0, 1.0, (4, 3))


class _BatchNormCheck:
    def __init__(self, rng):
        reg = ModelParams()
        self.bn = BatchNorm(reg, "bn", 3)
        _jitter(reg.trainable(), rng)
        self.params = reg.trainable()

    def sample(self, rng):
        return rng.normal(0.0, 1.0, (6, 3))

    def forward(self, x):
        return self.bn.forward(x, update_running=False)

    def backward(self, cache, dy):
        return self.bn.backward(cache, dy)


class _StatCheck:
    def __init__(self, operators):
        self.layer = StatisticalLayer(operators)
        self.params = []

    def sample(self, rng):
        M = int(rng.integers(2, 7))
        return rng.normal(0.0, 1.0, (M, 3))

    def kink(self, x):
        if not {"median", "min", "max"} & set(self.layer.operators):
            return np.inf
        s = np.sort(x, axis=0)
        return float(np.min(np.diff(s, axis=0)))

    def forward(self, x):
        return self.layer.forward(x)

    def backward(self, cache, dy):
        return self.layer.backward(cache, dy)


class _ComparisonCheck:
    """Input row 0 is the query vector, the remaining rows are the samples."""

    def __init__(self, variant, rng):
        reg = ModelParams()
        self.cmp = Comparison(variant, 4, reg, rng)
        _jitter(reg.trainable(), rng, 0.2)
        self.params = reg.trainable()

    def sample(self, rng):
        return rng.normal(0.0, 1.0, (4, 4))

    def kink(self, x):
        if self.cmp.W is None:
            return np.inf
        _, cache = self.cmp.forward(x[0], x[1:])
        return float(np.min(np.abs(cache[-1])))

    def forward(self, x):
        return self.cmp.forward(x[0], x[1:])

    def backward(self, cache, dy):
        da, dB = self.cmp.backward(cache, dy)
        return np.vstack([da, dB])


class _RelationMLPCheck:
    def __init__(self, rng):
        reg = ModelParams()
        self.mlp = RelationMLP(reg, 3, rng=rng)
        _jitter(reg.trainable(), rng)
        self.params = reg.trainable()

    def sample(self, rng):
        return rng.normal(0.0, 1.0, (11, 3))

    def kink(self, x):
        _, (_, pre, _) = self.mlp.forward(x)
        return float(np.min(np.abs(pre)))

    def forward(self, x):
        return self.mlp.forward(x)

    def backward(self, cache, dy):
        return self.mlp.backward(cache, dy)


class _LossCheck:
    def __init__(self, weighted, rng):
        self.head = LossHead(int(rng.integers(0, 11)), weighted)
        self.params = []

    def sample(self, rng):
        return rng.normal(0.0, 2.0, 11)

    def forward(self, x):
        return self.head.forward(x)

    def backward(self, cache, dy):
        return self.head.backward(cache, dy)


def layer_factories() -> dict:
    """Name -> callable(rng) building a fresh adapter."""
    f = {
        "gru": _GRUCheck,
        "stacked_gru": _StackedGRUCheck,
        "batchnorm": _BatchNormCheck,
    }
    for op in STAT_OPERATORS:
        f[f"stat.{op}"] = lambda rng, op=op: _StatCheck((op,))
    f["stat.all"] = lambda rng: _StatCheck(STAT_OPERATORS)
    for v in COMPARISONS:
        f[f"cmp.{v}"] = lambda rng, v=v: _ComparisonCheck(v, rng)
    f["relation_mlp"] = _RelationMLPCheck
    f["loss.wbce"] = lambda rng: _LossCheck(True, rng)
    f["loss.bce"] = lambda rng: _LossCheck(False, rng)
    return f


LAYERS = tuple(layer_factories())


def _draw(adapter, rng, tries=50):
    for _ in range(tries):
        x = adapter.sample(rng)
        kink = getattr(adapter, "kink", None)
        if kink is None or kink(x) > KINK_MARGIN:
            return x
    raise RuntimeError("could not draw an input away from non-differentiable points")


def _corrupt(adapter):
    """Mutation used to show the checker catches a wrong backward pass."""
    inner = adapter.backward

    def wrong(cache, dy):
        return 1.01 * np.asarray(inner(cache, dy))
    adapter.backward = wrong
    return adapter


@dataclass
class LayerResult:
    layer: str
    reports: list[CheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.reports, key=lambda r: r.max_rel_error)
        return (f"{status} {self.layer} seeds={len(self.reports)} "
                f"max_rel_err={self.max_rel_error:.3e} worst={worst.worst}")


def run_gradchecks(layers=None, seeds: int = 10, step: float = 1e-5, tol: float = 1e-4,
                   base_seed: int = 0, corrupt: str | None = None) -> list[LayerResult]:
    """Check each named layer at ``seeds`` independent draws of weights and inputs."""
    factories = layer_factories()
    names = list(layers) if layers else list(factories)
    unknown = [n for n in names if n not in factories]
    if unknown:
        raise ValueError(f"unknown layer(s) {unknown}; choose from {', '.join(factories)}")
    if corrupt is not None and corrupt not in factories:
        raise ValueError(f"unknown layer {corrupt!r}")
    results = []
    for li, name in enumerate(names):
        reports = []
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, li, s])
            adapter = factories[name](rng)
            if name == corrupt:
                _corrupt(adapter)
            x = _draw(adapter, rng)
            reports.append(fd_check(adapter, x, step=step, tol=tol, rng=rng,
                                    name=f"{name}#{s}"))
        results.append(LayerResult(name, reports))
    return results
