"""Differentiable building blocks for the convolutional document model.

All operations work on plain 2-d float64 numpy arrays ("matrices"): rows
index feature/embedding dimensions and columns index positions along the
text axis.  Zero-width matrices (shape ``(r, 0)``) are legal values and
arise from empty inputs.  Every forward operation has an explicit backward
companion returning exact partial derivatives, and :func:`grad_check` is
the central-finite-difference harness used to verify them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "FilterBank",
    "PoolSpec",
    "PoolTrace",
    "wide_conv_forward",
    "wide_conv_backward",
    "resolve_k",
    "kmax_forward",
    "kmax_backward",
    "tanh_forward",
    "tanh_backward",
    "softmax",
    "softmax_xent",
    "grad_check",
    "ceil_fraction",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are inconsistent with each other or with a prior forward call."""


def _as_matrix(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FilterBank:
    """Convolution weights of shape (depth, width, maps) plus one bias per map.

    ``depth`` must equal the row count of any matrix the bank convolves;
    each of the ``maps`` feature maps spans all input rows and produces
    exactly one output row.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise ShapeMismatchError(
                f"filter weights must be 3-d (depth, width, maps), got shape {w.shape}"
            )
        if min(w.shape) < 1:
            raise ShapeMismatchError(f"filter bank dimensions must be >= 1, got {w.shape}")
        b = np.asarray(self.bias, dtype=np.float64)
        if b.shape != (w.shape[2],):
            raise ShapeMismatchError(
                f"bias shape {b.shape} does not match {w.shape[2]} feature maps"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("filter bank contains non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def depth(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def maps(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class PoolSpec:
    """How many columns k-max pooling keeps.

    ``fixed`` mode always keeps ``k_top`` columns; ``dynamic`` mode keeps a
    ``fraction`` of the logical sequence length, never dropping below the
    ``k_top`` floor.
    """

    mode: str
    k_top: int
    fraction: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError(f"pool mode must be 'fixed' or 'dynamic', got {self.mode!r}")
        if self.k_top < 1:
            raise ValueError(f"k_top must be >= 1, got {self.k_top}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")


@dataclass
class PoolTrace:
    """Selection record from one k-max pooling call.

    ``indices`` has shape (rows, min(k, input_width)); each row is strictly
    increasing so the backward pass routes gradients in original order.
    """

    indices: np.ndarray
    input_width: int
    k: int


def ceil_fraction(fraction: float, n: int) -> int:
    # Guard against float noise like 0.2 * 10 == 2.0000000000000004.
    return int(math.ceil(fraction * n - 1e-9))


def resolve_k(spec: PoolSpec, n: int) -> int:
    """Number of columns to keep when pooling a sequence of logical length n."""
    if n < 0:
        raise ValueError(f"sequence length must be >= 0, got {n}")
    if spec.mode == "fixed":
        return spec.k_top
    return max(spec.k_top, ceil_fraction(spec.fraction, n))


def wide_conv_forward(input: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Wide ("full") 1-d convolution across columns, summed over rows.

    For a d x n input and a bank of shape (d, w, m) the output is m x (n+w-1):

        out[m, t] = bias[m] + sum_{c, j} weights[c, j, m] * x[c, t + j - (w-1)]

    with x treated as zero outside its n columns, so every filter weight
    reaches every column including the edges.
    """
    x = _as_matrix(input)
    d, n = x.shape
    if bank.depth != d:
        raise ShapeMismatchError(
            f"input has {d} rows but filter bank depth is {bank.depth} "
            f"(input {x.shape}, weights {bank.weights.shape})"
        )
    w = bank.width
    out_width = n + w - 1
    if out_width == 0:
        return np.zeros((bank.maps, 0))
    padded = np.zeros((d, n + 2 * (w - 1)))
    padded[:, w - 1 : w - 1 + n] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, w, axis=1)
    out = np.einsum("ctj,cjm->mt", windows, bank.weights)
    out += bank.bias[:, np.newaxis]
    return out


def wide_conv_backward(
    grad_out: np.ndarray, input: np.ndarray, bank: FilterBank
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the wide convolution w.r.t. input, weights and bias.

    ``grad_out`` is the loss gradient at the forward output; the returned
    triple is (grad_input, grad_weights, grad_bias) with the shapes of the
    corresponding forward arguments.
    """
    g = _as_matrix(grad_out, "grad_out")
    x = _as_matrix(input)
    d, n = x.shape
    w = bank.width
    if bank.depth != d:
        raise ShapeMismatchError(
            f"input has {d} rows but filter bank depth is {bank.depth}"
        )
    if g.shape != (bank.maps, n + w - 1):
        raise ShapeMismatchError(
            f"grad_out shape {g.shape} does not match expected "
            f"({bank.maps}, {n + w - 1}) for input width {n}"
        )
    grad_bias = g.sum(axis=1)
    if n + w - 1 == 0:
        return np.zeros_like(x), np.zeros_like(bank.weights), grad_bias
    padded = np.zeros((d, n + 2 * (w - 1)))
    padded[:, w - 1 : w - 1 + n] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, w, axis=1)
    grad_weights = np.einsum("mt,ctj->cjm", g, windows)
    if n == 0:
        grad_input = np.zeros((d, 0))
    else:
        # grad_x[c, i] = sum_{m, j} weights[c, j, m] * g[m, i + (w-1) - j]
        gwin = np.lib.stride_tricks.sliding_window_view(g, w, axis=1)
        grad_input = np.einsum("cqm,miq->ci", bank.weights[:, ::-1, :], gwin)
    return grad_input, grad_weights, grad_bias


def kmax_forward(
    input: np.ndarray, spec: PoolSpec, sequence_length: int
) -> tuple[np.ndarray, PoolTrace]:
    """Keep the k largest values of every row, preserving their original order.

    ``sequence_length`` is the logical length used to resolve dynamic k;
    rows shorter than k are right-padded with zeros.
    """
    x = _as_matrix(input)
    r, n = x.shape
    k = resolve_k(spec, sequence_length)
    if n <= k:
        indices = np.tile(np.arange(n, dtype=np.int64), (r, 1))
        out = np.zeros((r, k))
        out[:, :n] = x
    else:
        # Stable argsort on the negated values keeps the lower index first
        # among ties, then re-sorting restores left-to-right order.
        top = np.argsort(-x, axis=1, kind="stable")[:, :k]
        indices = np.sort(top, axis=1)
        out = np.take_along_axis(x, indices, axis=1)
    return out, PoolTrace(indices=indices, input_width=n, k=k)


def kmax_backward(grad_out: np.ndarray, trace: PoolTrace) -> np.ndarray:
    """Route pooled gradients back to the selected columns; padding gets none."""
    g = _as_matrix(grad_out, "grad_out")
    r, m = trace.indices.shape
    if g.shape != (r, trace.k):
        raise ShapeMismatchError(
            f"grad_out shape {g.shape} does not match pooled shape ({r}, {trace.k})"
        )
    grad_input = np.zeros((r, trace.input_width))
    np.put_along_axis(grad_input, trace.indices, g[:, :m], axis=1)
    return grad_input


def tanh_forward(input: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(input, dtype=np.float64))


def tanh_backward(grad_out: np.ndarray, forward_output: np.ndarray) -> np.ndarray:
    out = np.asarray(forward_output, dtype=np.float64)
    return np.asarray(grad_out, dtype=np.float64) * (1.0 - out * out)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilised softmax of a logit vector."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_xent(logits: np.ndarray, label: int) -> tuple[np.ndarray, float, np.ndarray]:
    """Softmax probabilities, cross-entropy loss and its logit gradient.

    Returns ``(probabilities, loss, grad_logits)`` where
    ``loss = -log p[label]`` and ``grad_logits = p - onehot(label)``.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    if not 0 <= label < z.size:
        raise IndexError(f"label {label} out of range for {z.size} classes")
    shifted = z - z.max()
    e = np.exp(shifted)
    total = e.sum()
    probs = e / total
    loss = float(np.log(total) - shifted[label])
    grad = probs.copy()
    grad[label] -= 1.0
    return probs, loss, grad


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Compare a function's analytic gradient against central differences.

    ``fn`` maps a parameter array to ``(scalar value, gradient)`` where the
    gradient has the array's shape.  Returns the maximum over coordinates of

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    with ``numeric`` the central difference at step ``eps``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x0 = np.asarray(x, dtype=np.float64)
    value, analytic = fn(x0)
    if not np.isfinite(value):
        raise FloatingPointError(f"function value {value} is non-finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ShapeMismatchError(
            f"analytic gradient shape {analytic.shape} does not match parameters {x0.shape}"
        )
    work = x0.copy()
    flat = work.reshape(-1)
    flat_analytic = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus, _ = fn(work)
        flat[i] = orig - eps
        f_minus, _ = fn(work)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(
                f"non-finite function value while perturbing coordinate {i}"
            )
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = flat_analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
