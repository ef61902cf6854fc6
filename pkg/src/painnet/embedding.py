"""Video embedding: per-segment GRU, dropout, batch norm and statistical pooling."""

from __future__ import annotations

import numpy as np

from .diffcore import ModelParams, NonFiniteError

STAT_OPERATORS = ("mean", "median", "std", "lse", "min", "max")
STD_FLOOR = 1e-8


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class GRU:
    """Unidirectional single-layer GRU returning the hidden state at the last step.

    Gates are stacked as [reset, update, candidate] in ``W_x`` (3d x A),
    ``W_h`` (3d x d) and ``b`` (3d)::

        r = sigmoid(W_xr x + W_hr h + b_r)
        z = sigmoid(W_xz x + W_hz h + b_z)
        n = tanh(W_xn x + r * (W_hn h) + b_n)
        h' = (1 - z) * n + z * h
    """

    def __init__(self, registry: ModelParams, prefix: str, input_size: int, hidden: int,
                 rng: np.random.Generator | None = None):
        self.input_size = input_size
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        if rng is None:
            wx = np.zeros((3 * hidden, input_size))
            wh = np.zeros((3 * hidden, hidden))
        else:
            wx = rng.uniform(-bound, bound, (3 * hidden, input_size))
            wh = rng.uniform(-bound, bound, (3 * hidden, hidden))
        self.W_x = registry.add(f"{prefix}.W_x", wx)
        self.W_h = registry.add(f"{prefix}.W_h", wh)
        self.b = registry.add(f"{prefix}.b", np.zeros(3 * hidden))

    @property
    def params(self):
        return [self.W_x, self.W_h, self.b]

    def forward(self, x: np.ndarray):
        """x: (B, L, A) batch of equal-length sequences -> (B, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, L, _ = x.shape
        d = self.hidden
        Wx, Wh, b = self.W_x.values, self.W_h.values, self.b.values
        xp = x @ Wx.T + b                      # (B, L, 3d) input projections
        h = np.zeros((B, d))
        steps = []
        for t in range(L):
            hp = h @ Wh.T
            r = sigmoid(xp[:, t, :d] + hp[:, :d])
            z = sigmoid(xp[:, t, d:2 * d] + hp[:, d:2 * d])
            hn = hp[:, 2 * d:]
            n = np.tanh(xp[:, t, 2 * d:] + r * hn)
            steps.append((h, r, z, n, hn))
            h = (1.0 - z) * n + z * h
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite GRU activation")
        return h, (x, steps)

    def backward(self, cache, dh: np.ndarray) -> np.ndarray:
        x, steps = cache
        d = self.hidden
        Wx, Wh = self.W_x.values, self.W_h.values
        dWx, dWh, db = self.W_x.grad, self.W_h.grad, self.b.grad
        dx = np.zeros_like(x)
        dh = np.array(dh, dtype=np.float64)
        for t in range(len(steps) - 1, -1, -1):
            h_prev, r, z, n, hn = steps[t]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dh_prev = dh * z
            da_n = dn * (1.0 - n * n)
            da_r = da_n * hn * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            da = np.concatenate([da_r, da_z, da_n], axis=1)          # input-side
            dhp = np.concatenate([da_r, da_z, da_n * r], axis=1)     # recurrent-side
            dWx += da.T @ x[:, t, :]
            db += da.sum(axis=0)
            dWh += dhp.T @ h_prev
            dh_prev += dhp @ Wh
            dx[:, t, :] = da @ Wx
            dh = dh_prev
        return dx


class BatchNorm:
    """Batch normalisation over rows of a (N, F) matrix.

    Training normalises with the batch statistics and updates the running
    estimates (unbiased variance); evaluation uses the running estimates only.
    """

    def __init__(self, registry: ModelParams, prefix: str, features: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = registry.add(f"{prefix}.gamma", np.ones(features))
        self.beta = registry.add(f"{prefix}.beta", np.zeros(features))
        self.running_mean = registry.add(f"{prefix}.running_mean", np.zeros(features),
                                         trainable=False)
        self.running_var = registry.add(f"{prefix}.running_var", np.ones(features),
                                        trainable=False)

    @property
    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, update_running: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var.values + self.eps)
            xhat = (x - self.running_mean.values) * inv
            return self.gamma.values * xhat + self.beta.values, ("eval", xhat, inv)
        n = x.shape[0]
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if update_running:
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean.values[...] = (1 - m) * self.running_mean.values + m * mu
            self.running_var.values[...] = (1 - m) * self.running_var.values + m * unbiased
        return self.gamma.values * xhat + self.beta.values, ("train", xhat, inv)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        mode, xhat, inv = cache
        self.gamma.grad += np.sum(dy * xhat, axis=0)
        self.beta.grad += np.sum(dy, axis=0)
        dxhat = dy * self.gamma.values
        if mode == "eval":
            return dxhat * inv
        n = dy.shape[0]
        return (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                            - xhat * np.sum(dxhat * xhat, axis=0))


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-p)."""
    if p <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


class StatisticalLayer:
    """Column-wise pooling of a (M, d) matrix into a (k, d) matrix of statistics.

    Rows follow ``operators`` in order. ``std`` uses divisor M and ``lse`` is
    max-shifted. The median, min and max pass gradients to the selected order
    statistic(s); ties resolve by stable sort, so the lower row index wins.
    """

    def __init__(self, operators=("mean", "std", "lse", "median")):
        unknown = [op for op in operators if op not in STAT_OPERATORS]
        if unknown or not operators:
            raise ValueError(f"unknown statistical operators: {unknown or 'none given'}")
        self.operators = tuple(operators)
        self.params = []

    @property
    def k(self) -> int:
        return len(self.operators)

    def forward(self, Q: np.ndarray):
        Q = np.asarray(Q, dtype=np.float64)
        M = Q.shape[0]
        if M < 1:
            raise ValueError("statistical layer needs at least one row")
        order = np.argsort(Q, axis=0, kind="stable")
        # reductions run over column-sorted values so row order cannot change a single bit
        Qs = np.take_along_axis(Q, order, axis=0)
        mean = Qs.mean(axis=0)
        rows, cache = [], {"M": M, "order": order, "Q": Q}
        for op in self.operators:
            if op == "mean":
                rows.append(mean)
            elif op == "median":
                rows.append(np.median(Qs, axis=0))
            elif op == "std":
                std = np.sqrt(np.mean((Qs - mean) ** 2, axis=0))
                cache["std"] = (Q - mean, std)
                rows.append(std)
            elif op == "lse":
                top = Qs[-1]
                s = np.exp(Qs - top).sum(axis=0)
                cache["lse"] = np.exp(Q - top) / s
                rows.append(top + np.log(s))
            elif op == "min":
                rows.append(Qs[0])
            elif op == "max":
                rows.append(Qs[-1])
        return np.stack(rows), cache

    def backward(self, cache, dS: np.ndarray) -> np.ndarray:
        M, order = cache["M"], cache["order"]
        dQ = np.zeros_like(cache["Q"])
        cols = np.arange(dQ.shape[1])
        for row, op in zip(dS, self.operators):
            if op == "mean":
                dQ += row / M
            elif op == "median":
                if M % 2:
                    dQ[order[M // 2], cols] += row
                else:
                    dQ[order[M // 2 - 1], cols] += 0.5 * row
                    dQ[order[M // 2], cols] += 0.5 * row
            elif op == "std":
                centered, std = cache["std"]
                dQ += row * centered / (M * np.maximum(std, STD_FLOOR))
            elif op == "lse":
                dQ += row * cache["lse"]
            elif op == "min":
                dQ[np.argmin(cache["Q"], axis=0), cols] += row
            elif op == "max":
                dQ[np.argmax(cache["Q"], axis=0), cols] += row
        return dQ



class StackedGRUSummarizer:
    """Second GRU that reads the segment embeddings in order and keeps its last state."""

    def __init__(self, registry: ModelParams, prefix: str, input_size: int, hidden: int,
                 rng: np.random.Generator | None = None):
        self.gru = GRU(registry, prefix, input_size, hidden, rng)
        self.out_dim = hidden

    @property
    def params(self):
        return self.gru.params

    def forward(self, Q: np.ndarray):
        h, cache = self.gru.forward(np.asarray(Q, dtype=np.float64)[None])
        return h[0], cache

    def backward(self, cache, dh: np.ndarray) -> np.ndarray:
        return self.gru.backward(cache, np.asarray(dh)[None])[0]


class StatSummarizer:
    """Statistical layer followed by operator-major flattening (k*d vector)."""

    def __init__(self, operators, hidden: int):
        self.layer = StatisticalLayer(operators)
        self.out_dim = self.layer.k * hidden
        self.params = []

    def forward(self, Q):
        S, cache = self.layer.forward(Q)
        return S.reshape(-1), (cache, S.shape)

    def backward(self, cache, dv):
        cache, shape = cache
        return self.layer.backward(cache, np.asarray(dv).reshape(shape))


class Embedder:
    """Segments of a batch of videos -> one normalised vector per video.

    Pipeline: GRU over each segment, dropout (training only), batch norm
    over every segment embedding in the batch, per-video summarizer, batch
    norm over the video vectors.
    """

    def __init__(self, registry: ModelParams, n_au: int, hidden: int = 16,
                 operators=("mean", "std", "lse", "median"), summarizer: str = "stats",
                 dropout: float = 0.5, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 hidden2: int | None = None, rng: np.random.Generator | None = None):
        self.gru = GRU(registry, "gru", n_au, hidden, rng)
        self.bn_seg = BatchNorm(registry, "bn_seg", hidden, bn_momentum, bn_eps)
        if summarizer == "stats":
            self.summarizer = StatSummarizer(operators, hidden)
        elif summarizer == "stacked_gru":
            self.summarizer = StackedGRUSummarizer(registry, "gru2", hidden,
                                                   hidden2 or hidden, rng)
        else:
            raise ValueError(f"unknown summarizer {summarizer!r}")
        self.bn_video = BatchNorm(registry, "bn_video", self.summarizer.out_dim,
                                  bn_momentum, bn_eps)
        self.dropout = dropout

    @property
    def out_dim(self) -> int:
        return self.summarizer.out_dim

    def forward(self, videos, train: bool = False, rng: np.random.Generator | None = None):
        """``videos``: list of (M_v, L, A) segment stacks. Returns (n_videos, out_dim)."""
        counts = [len(v) for v in videos]
        if min(counts) < 1:
            raise ValueError("every video needs at least one segment")
        X = np.concatenate(videos, axis=0)
        H, gru_cache = self.gru.forward(X)
        mask = None
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("training-mode embedding needs a random generator")
            mask = dropout_mask(H.shape, self.dropout, rng)
            H = H * mask
        self.bn_seg.training = self.bn_video.training = train
        B, bn_seg_cache = self.bn_seg.forward(H)
        bounds = np.cumsum([0] + counts)
        vecs, summ_caches = [], []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            v, c = self.summarizer.forward(B[lo:hi])
            vecs.append(v)
            summ_caches.append(c)
        out, bn_video_cache = self.bn_video.forward(np.stack(vecs))
        cache = (gru_cache, mask, bn_seg_cache, bounds, summ_caches, bn_video_cache)
        return out, cache

    def backward(self, cache, dout: np.ndarray) -> None:
        gru_cache, mask, bn_seg_cache, bounds, summ_caches, bn_video_cache = cache
        dvecs = self.bn_video.backward(bn_video_cache, dout)
        dB = np.zeros((bounds[-1], self.gru.hidden))
        for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            dB[lo:hi] = self.summarizer.backward(summ_caches[i], dvecs[i])
        dH = self.bn_seg.backward(bn_seg_cache, dB)
        if mask is not None:
            dH = dH * mask
        self.gru.backward(gru_cache, dH)
