"""Relation module: compare a query vector with each sample vector, score, softmax."""

from __future__ import annotations

import numpy as np

from .diffcore import ModelParams

COMPARISONS = ("euccos", "subt", "mult", "nn", "submultnn")
NORM_FLOOR = 1e-12


class Comparison:
    """Pairwise comparison of a query vector ``a`` (n,) against rows of ``B`` (K, n).

    ``euccos``     [||a-b||, cos(a, b)]           -> 2
    ``subt``       (a-b)*(a-b)                    -> n
    ``mult``       a*b                            -> n
    ``nn``         ReLU(W [a; b] + c)             -> n
    ``submultnn``  ReLU(W [(a-b)^2; a*b] + c)     -> n

    Cosine is defined as 0 when either norm is below 1e-12.
    """

    def __init__(self, variant: str, dim: int, registry: ModelParams | None = None,
                 rng: np.random.Generator | None = None):
        if variant not in COMPARISONS:
            raise ValueError(f"unknown comparison {variant!r}; choose from {COMPARISONS}")
        self.variant = variant
        self.dim = dim
        self.W = self.c = None
        if variant in ("nn", "submultnn"):
            if registry is None:
                registry = ModelParams()
            bound = 1.0 / np.sqrt(2 * dim)
            w = (rng.uniform(-bound, bound, (dim, 2 * dim)) if rng is not None
                 else np.zeros((dim, 2 * dim)))
            self.W = registry.add("cmp.W", w)
            self.c = registry.add("cmp.b", np.zeros(dim))

    @property
    def params(self):
        return [self.W, self.c] if self.W is not None else []

    @property
    def out_dim(self) -> int:
        return 2 if self.variant == "euccos" else self.dim

    def forward(self, a: np.ndarray, B: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if a.shape[-1] != B.shape[-1]:
            raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {B.shape[-1]}")
        diff = a - B
        v = self.variant
        if v == "euccos":
            dist = np.sqrt(np.sum(diff * diff, axis=1))
            na = np.linalg.norm(a)
            nb = np.linalg.norm(B, axis=1)
            ok = (nb >= NORM_FLOOR) & (na >= NORM_FLOOR)
            cos = np.zeros(len(B))
            cos[ok] = (B[ok] @ a) / (na * nb[ok])
            return np.stack([dist, cos], axis=1), (a, B, diff, dist, na, nb, cos, ok)
        if v == "subt":
            return diff * diff, (a, B, diff)
        if v == "mult":
            return a * B, (a, B)
        if v == "nn":
            feats = np.concatenate([np.broadcast_to(a, B.shape), B], axis=1)
        else:
            feats = np.concatenate([diff * diff, a * B], axis=1)
        pre = feats @ self.W.values.T + self.c.values
        return np.maximum(pre, 0.0), (a, B, diff, feats, pre)

    def backward(self, cache, dC: np.ndarray):
        """Returns (da, dB)."""
        v = self.variant
        if v == "euccos":
            a, B, diff, dist, na, nb, cos, ok = cache
            ddist, dcos = dC[:, 0], dC[:, 1]
            safe = np.where(dist > 0, dist, 1.0)
            g = np.where(dist > 0, ddist / safe, 0.0)[:, None] * diff
            da = g.sum(axis=0)
            dB = -g
            if ok.any():
                Bo, nbo, co, dco = B[ok], nb[ok][:, None], cos[ok][:, None], dcos[ok][:, None]
                da += np.sum(dco * (Bo / (na * nbo) - co * a / na ** 2), axis=0)
                dB[ok] += dco * (a / (na * nbo) - co * Bo / nbo ** 2)
            return da, dB
        if v == "subt":
            a, B, diff = cache
            g = 2.0 * dC * diff
            return g.sum(axis=0), -g
        if v == "mult":
            a, B = cache
            return np.sum(dC * B, axis=0), dC * a
        a, B, diff, feats, pre = cache
        dpre = dC * (pre > 0)
        self.W.grad += dpre.T @ feats
        self.c.grad += dpre.sum(axis=0)
        dfeat = dpre @ self.W.values
        n = self.dim
        if v == "nn":
            return dfeat[:, :n].sum(axis=0), dfeat[:, n:].copy()
        dsq, dmul = dfeat[:, :n], dfeat[:, n:]
        g = 2.0 * dsq * diff
        return g.sum(axis=0) + np.sum(dmul * B, axis=0), -g + dmul * a


class RelationMLP:
    """Two fully connected layers (in -> 2 -> 1) with a ReLU in between.

    Weights are shared across all compared pairs; the output score is not squashed.
    """

    def __init__(self, registry: ModelParams, in_dim: int, hidden: int = 2,
                 rng: np.random.Generator | None = None):
        b1 = 1.0 / np.sqrt(in_dim)
        b2 = 1.0 / np.sqrt(hidden)
        if rng is None:
            w1, w2 = np.zeros((hidden, in_dim)), np.zeros((1, hidden))
        else:
            w1 = rng.uniform(-b1, b1, (hidden, in_dim))
            w2 = rng.uniform(-b2, b2, (1, hidden))
        self.W1 = registry.add("rel.W1", w1)
        self.b1 = registry.add("rel.b1", np.zeros(hidden))
        self.W2 = registry.add("rel.W2", w2)
        self.b2 = registry.add("rel.b2", np.zeros(1))

    @property
    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, C: np.ndarray):
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        pre = C @ self.W1.values.T + self.b1.values
        hid = np.maximum(pre, 0.0)
        r = hid @ self.W2.values[0] + self.b2.values[0]
        return r, (C, pre, hid)

    def backward(self, cache, dr: np.ndarray) -> np.ndarray:
        C, pre, hid = cache
        dr = np.asarray(dr, dtype=np.float64)
        self.W2.grad[0] += dr @ hid
        self.b2.grad[0] += dr.sum()
        dpre = np.outer(dr, self.W2.values[0]) * (pre > 0)
        self.W1.grad += dpre.T @ C
        self.b1.grad += dpre.sum(axis=0)
        return dpre @ self.W1.values


def orient_euccos(mlp: RelationMLP) -> None:
    """Fix the signs of a freshly drawn [distance, cosine] head, keeping magnitudes.

    Hidden units get a positive distance weight (so they are active, as the
    distance is non-negative) and a negative cosine weight; output weights
    are negative. The initial score then falls with distance and rises with
    similarity. With free signs a 2-input head often starts dead or
    anti-metric and the embedding co-adapts to it instead of learning.
    """
    W1 = mlp.W1.values
    W1[:, 0] = np.abs(W1[:, 0])
    W1[:, 1] = -np.abs(W1[:, 1])
    mlp.W2.values[...] = -np.abs(mlp.W2.values)


def relation_score(c: np.ndarray, mlp: RelationMLP) -> float:
    r, _ = mlp.forward(np.asarray(c)[None])
    return float(r[0])


def softmax(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    e = np.exp(r - r.max())
    return e / e.sum()


class RelationModule:
    """Comparison layer + relation MLP applied to one query and K sample vectors."""

    def __init__(self, registry: ModelParams, dim: int, variant: str = "euccos",
                 rng: np.random.Generator | None = None):
        self.compare = Comparison(variant, dim, registry, rng)
        self.mlp = RelationMLP(registry, self.compare.out_dim, rng=rng)
        if variant == "euccos" and rng is not None:
            orient_euccos(self.mlp)

    @property
    def params(self):
        return self.compare.params + self.mlp.params

    def forward(self, query: np.ndarray, samples: np.ndarray):
        C, ccache = self.compare.forward(query, samples)
        r, mcache = self.mlp.forward(C)
        return r, (ccache, mcache)

    def backward(self, cache, dr: np.ndarray):
        ccache, mcache = cache
        dC = self.mlp.backward(mcache, dr)
        return self.compare.backward(ccache, dC)


def episode_probs(query: np.ndarray, samples: np.ndarray, module: RelationModule):
    """Relation scores and their softmax for one query against ordered sample vectors.

    Returns ``(p, r)``; index c of both corresponds to the sample at position c.
    """
    r, _ = module.forward(query, samples)
    return softmax(r), r
