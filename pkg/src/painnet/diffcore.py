"""Differentiable-layer substrate: parameters, gradient checking, ADAM, checkpoints.

Every layer in the package follows one contract::

    y, cache = layer.forward(x)
    dx = layer.backward(cache, dy)    # also accumulates into p.grad

Gradients are written explicitly per layer; there is no tape.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CKPT_HEADER = "painnet-ckpt"
CKPT_VERSION = "v1"
SECTION = "---"


class NonFiniteError(FloatingPointError):
    """Raised when a gradient, update or activation stops being finite."""


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class ModelParams:
    """Ordered registry of named tensors (registration order is iteration order)."""

    def __init__(self):
        self._tensors: OrderedDict[str, ParamTensor] = OrderedDict()

    def add(self, name: str, values, trainable: bool = True) -> ParamTensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = ParamTensor(name, values, trainable)
        self._tensors[name] = p
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable(self) -> list[ParamTensor]:
        return [p for p in self if p.trainable]

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self}

    def restore(self, snap: dict[str, np.ndarray]):
        for name, arr in snap.items():
            p = self._tensors[name]
            if p.shape != arr.shape:
                raise CheckpointShapeError(
                    f"shape mismatch for {name}: model expects {p.shape}, got {arr.shape}")
            p.values[...] = arr


# ---------------------------------------------------------------------------
# optimisation


def clip_global_norm(params: Iterable[ParamTensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the factor that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = list(params)
    sq = 0.0
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
        sq += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        p.grad *= factor
    return factor


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "OptimizerState":
        m = {p.name: np.zeros_like(p.values) for p in params.trainable()}
        v = {p.name: np.zeros_like(p.values) for p in params.trainable()}
        return cls(m, v, 0)


def adam_step(params: ModelParams, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected ADAM update of every trainable tensor, in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params.trainable():
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(update)):
            raise NonFiniteError(f"non-finite ADAM update for {p.name}")
        p.values -= update


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class CheckReport:
    name: str
    max_rel_error: float
    worst: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} ({self.worst})"


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)


def fd_check(layer, x: np.ndarray, step: float = 1e-5, tol: float = 1e-4,
             rng: np.random.Generator | None = None, name: str | None = None) -> CheckReport:
    """Compare analytic gradients of ``layer`` with central differences.

    The layer output is reduced to a scalar with fixed random weights so
    every output element contributes. Both the input gradient and the
    gradient of every trainable parameter the layer exposes (``layer.params``)
    are checked. ``layer.forward`` must be deterministic for repeated calls.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    params = [p for p in getattr(layer, "params", []) if p.trainable]

    y, cache = layer.forward(x)
    y = np.asarray(y, dtype=np.float64)
    w = rng.uniform(0.5, 1.5, size=y.shape) * rng.choice([-1.0, 1.0], size=y.shape)

    def scalar(inp):
        out, _ = layer.forward(inp)
        val = float(np.sum(w * np.asarray(out)))
        if not np.isfinite(val):
            raise NonFiniteError("non-finite output during finite differencing")
        return val

    for p in params:
        p.zero_grad()
    dx = np.asarray(layer.backward(cache, w.copy()), dtype=np.float64)
    analytic = [("input", dx, x)] + [(p.name, p.grad.copy(), p.values) for p in params]
    for _, g, _ in analytic:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite analytic gradient")

    worst, worst_name = 0.0, "none"
    for label, grad, target in analytic:
        flat = target.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar(x)
            flat[i] = orig - step
            fm = scalar(x)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * step)
        if flat.size:
            errs = _rel_err(grad.reshape(-1), num)
            i = int(np.argmax(errs))
            if errs[i] > worst:
                worst, worst_name = float(errs[i]), f"{label}[{i}]"
    return CheckReport(name or type(layer).__name__, worst, worst_name, tol)


# ---------------------------------------------------------------------------
# checkpoints


def _fmt(arr: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(arr).reshape(-1))


def _tensor_block(name: str, arr: np.ndarray) -> list[str]:
    dims = " ".join(str(d) for d in arr.shape)
    head = f"{name} {dims}".rstrip()
    return [head, _fmt(arr)]


def save_checkpoint(path, params: ModelParams, state: OptimizerState | None,
                    meta: dict[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{CKPT_HEADER} {CKPT_VERSION}"]
    for p in params:
        lines += _tensor_block(p.name, p.values)
    lines.append(SECTION)
    if state is None:
        lines.append("optimizer none")
    else:
        lines.append(f"optimizer t {state.t}")
        for name in state.m:
            lines += _tensor_block("m:" + name, state.m[name])
            lines += _tensor_block("v:" + name, state.v[name])
    lines.append(SECTION)
    for key in sorted(meta):
        lines.append(f"{key} = {meta[key]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _read_tensors(lines: list[str]) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    if len(lines) % 2:
        raise CheckpointError("truncated checkpoint: tensor header without values")
    for head, body in zip(lines[0::2], lines[1::2]):
        parts = head.split()
        try:
            shape = tuple(int(d) for d in parts[1:])
            vals = np.array([float(v) for v in body.split()], dtype=np.float64)
        except (ValueError, IndexError) as exc:
            raise CheckpointError(f"malformed tensor block {head!r}") from exc
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"truncated checkpoint: {parts[0]} has {vals.size} values, "
                                  f"expected {int(np.prod(shape))}")
        out[parts[0]] = vals.reshape(shape)
    return out


def load_checkpoint(path, expected: ModelParams | None = None):
    """Read a checkpoint; returns ``(tensors, state, meta)``.

    With ``expected`` given, every tensor's name and shape must match and the
    values are copied into it (shape mismatch raises ``CheckpointShapeError``).
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.endswith("\n"):
        raise CheckpointError("truncated checkpoint")
    lines = text.split("\n")[:-1]
    if not lines or not lines[0].startswith(CKPT_HEADER):
        raise CheckpointError("not a painnet checkpoint")
    version = lines[0][len(CKPT_HEADER):].strip()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version!r}")
    try:
        s1 = lines.index(SECTION)
        s2 = lines.index(SECTION, s1 + 1)
    except ValueError as exc:
        raise CheckpointError("truncated checkpoint: missing section delimiter") from exc

    tensors = _read_tensors(lines[1:s1])
    opt_lines = lines[s1 + 1:s2]
    state = None
    if not opt_lines:
        raise CheckpointError("truncated checkpoint: empty optimizer section")
    if opt_lines[0] != "optimizer none":
        parts = opt_lines[0].split()
        if len(parts) != 3 or parts[:2] != ["optimizer", "t"]:
            raise CheckpointError(f"bad optimizer header {opt_lines[0]!r}")
        moments = _read_tensors(opt_lines[1:])
        m = OrderedDict((k[2:], v) for k, v in moments.items() if k.startswith("m:"))
        v = OrderedDict((k[2:], a) for k, a in moments.items() if k.startswith("v:"))
        state = OptimizerState(dict(m), dict(v), int(parts[2]))

    meta = {}
    for line in lines[s2 + 1:]:
        key, sep, val = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"bad config line {line!r}")
        meta[key] = val

    if expected is not None:
        if list(tensors) != expected.names():
            raise CheckpointShapeError(
                f"parameter set mismatch: checkpoint has {list(tensors)}, "
                f"model has {expected.names()}")
        expected.restore(tensors)
        if state is not None:
            for name, arr in state.m.items():
                if arr.shape != expected[name].shape:
                    raise CheckpointShapeError(f"optimizer moment shape mismatch for {name}")
    return tensors, state, meta
