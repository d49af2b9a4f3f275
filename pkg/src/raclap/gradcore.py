"""Deterministic numeric substrate.

Tensors are plain ``float64`` numpy arrays. Every op here reduces in ascending
index order, so a row's result never depends on how many other rows share the
call; this is what makes batched and one-by-one encoding agree bit for bit.

Forward ops broadcast over leading axes. The gradient checker relies on that
to evaluate many perturbed copies of a parameter in a single call.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EvaluationError

Tensor = np.ndarray

NORM_EPS = 1e-12
# cumsum over a materialized product wins only while each accumulation step is tiny;
# past this many elements per step a plain ascending loop is cheaper
_LOOP_THRESHOLD = 1024

_mode = threading.local()


def _unordered() -> bool:
    return getattr(_mode, "unordered", False)


@contextlib.contextmanager
def unordered_reductions():
    """Use BLAS matmul and numpy's native sums inside the block.

    Results stay deterministic for a fixed build but lose the ascending-order
    guarantee. Only finite-difference sweeps use this.
    """
    previous = _unordered()
    _mode.unordered = True
    try:
        yield
    finally:
        _mode.unordered = previous


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Build a finite float64 tensor, optionally reshaped to ``shape``."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"dimensions must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(
                f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError("tensor values must be finite")
    return arr


def ordered_sum(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` strictly left to right.

    ``np.sum`` uses pairwise summation whose grouping depends on the array
    length and memory layout; a running accumulation does not.
    """
    x = np.asarray(x, dtype=np.float64)
    if _unordered():
        return np.sum(x, axis=axis, keepdims=keepdims)
    n = x.shape[axis]
    if n > 16 and x.size // n >= _LOOP_THRESHOLD:
        xs = np.moveaxis(x, axis, 0)
        out = xs[0]
        for i in range(1, n):
            out = out + xs[i]
    else:
        out = np.take(np.cumsum(x, axis=axis), -1, axis=axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def ordered_mean(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return ordered_sum(x, axis, keepdims) / x.shape[axis]


@dataclass(eq=False)
class Parameter:
    name: str
    value: Tensor
    grad: Tensor = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: Tensor) -> None:
        if not self.trainable:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match {self.name} shape {self.value.shape}"
            )
        self.grad = self.grad + g


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with ascending-k accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if _unordered():
        return np.matmul(a, b)
    k = a.shape[-1]
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, n = a.shape[-2], b.shape[-1]
    if k > 16 and int(np.prod(lead, dtype=np.int64)) * m * n < _LOOP_THRESHOLD:
        prod = a[..., :, :, None] * b[..., None, :, :]
        return np.cumsum(prod, axis=-2)[..., -1, :]
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        out = out + a[..., :, i : i + 1] * b[..., i : i + 1, :]
    return out


def matmul_backward(g: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Gradients of ``matmul(a, b)`` for 2-D operands given upstream ``g``."""
    return matmul(g, np.swapaxes(b, -1, -2)), matmul(np.swapaxes(a, -1, -2), g)


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(g: Tensor, x: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return np.where(np.asarray(x) > 0, g, 0.0)


def softmax_rows(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / ordered_sum(e, -1, keepdims=True)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(ordered_sum(np.exp(shifted), -1, keepdims=True))


def softmax_rows_backward(g: Tensor, y: Tensor) -> Tensor:
    """``y`` is the forward output."""
    return y * (g - ordered_sum(g * y, -1, keepdims=True))


def log_softmax_rows_backward(g: Tensor, log_y: Tensor) -> Tensor:
    """``log_y`` is the forward output."""
    return g - np.exp(log_y) * ordered_sum(g, -1, keepdims=True)


def row_norms(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(ordered_sum(x * x, -1))


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    norms = row_norms(x)
    bad = np.argwhere(norms < eps)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        row = idx[0] if len(idx) == 1 else idx
        raise DegenerateVectorError(f"row {row} has norm {norms[idx]:.3e} below {eps:g}")
    return x / norms[..., None]


def l2_normalize_rows_backward(g: Tensor, y: Tensor, norms: Tensor) -> Tensor:
    """``y`` is the normalized output and ``norms`` the pre-normalization row norms."""
    radial = ordered_sum(g * y, -1, keepdims=True)
    return (g - y * radial) / norms[..., None]


# --------------------------------------------------------------------------
# finite-difference validation


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    max_abs_error: float = 0.0
    num_checked: int = 0
    skipped: list[str] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: Tensor, numeric: Tensor, floor: float) -> Tensor:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero entries from dividing by ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    f: Callable[[], float | Tensor],
    params: Iterable[Parameter],
    step: float = 1e-6,
    *,
    analytic: dict[str, Tensor] | None = None,
    vectorized: bool = False,
    fast: bool = True,
    chunk: int = 256,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` is called with no arguments and reads the current parameter values.
    Analytic gradients default to each parameter's ``grad`` field, so run the
    backward pass before calling this.

    With ``vectorized=True`` the value of the parameter being probed is
    temporarily replaced by a stack of ``2 * chunk`` perturbed copies along a
    new leading axis, and ``f`` must return one loss per copy (or a scalar if
    it does not depend on that parameter). ``fast`` runs the sweep under
    :func:`unordered_reductions`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    report = GradCheckReport(max_rel_error=0.0)

    base = np.asarray(f(), dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise EvaluationError("objective is not finite at the unperturbed point")

    for p in params:
        if not p.trainable:
            report.skipped.append(p.name)
            continue
        grad = p.grad if analytic is None else analytic[p.name]
        grad = np.asarray(grad, dtype=np.float64).reshape(-1)
        numeric = np.empty(p.value.size)
        original = p.value
        flat = original.reshape(-1)
        try:
            if vectorized:
                sweep = unordered_reductions() if fast else contextlib.nullcontext()
                with sweep:
                    _vectorized_sweep(f, p, flat, original.shape, step, chunk, numeric)
            else:
                for i in range(flat.size):
                    probe = flat.copy()
                    probe[i] += step
                    p.value = probe.reshape(original.shape)
                    plus = float(f())
                    probe[i] -= 2 * step
                    p.value = probe.reshape(original.shape)
                    minus = float(f())
                    if not (np.isfinite(plus) and np.isfinite(minus)):
                        raise EvaluationError(f"objective not finite while probing {p.name}[{i}]")
                    numeric[i] = (plus - minus) / (2 * step)
        finally:
            p.value = original
        rel = relative_error(grad, numeric, floor)
        worst = float(rel.max()) if rel.size else 0.0
        report.per_parameter[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.max_abs_error = max(report.max_abs_error, float(np.max(np.abs(grad - numeric))))
        report.num_checked += flat.size
    return report


def _vectorized_sweep(f, p: Parameter, flat: Tensor, shape: tuple, step: float,
                      chunk: int, numeric: Tensor) -> None:
    for start in range(0, flat.size, chunk):
        idx = np.arange(start, min(start + chunk, flat.size))
        c = idx.size
        stacked = np.repeat(flat[None, :], 2 * c, axis=0)
        stacked[np.arange(c), idx] += step
        stacked[c + np.arange(c), idx] -= step
        p.value = stacked.reshape((2 * c,) + shape)
        vals = np.broadcast_to(np.asarray(f(), dtype=np.float64), (2 * c,))
        if not np.all(np.isfinite(vals)):
            raise EvaluationError(f"objective not finite while probing {p.name}")
        numeric[idx] = (vals[:c] - vals[c:]) / (2 * step)
