"""Small dense linear-algebra kernels with deterministic semantics.

Everything operates on float64 numpy arrays. Matrix products go through
:func:`matmul` (or :meth:`Affine.apply`, which wraps it) so that multiply-add
counts accumulate on a :class:`FlopCounter`. Elementwise work -- softmax,
nonlinearities, weighted mixtures -- is deliberately not counted: the counter
exists to compare expert/gate/head matmul volume between execution paths, and
multiply-adds are the quantity both paths share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ShapeError

__all__ = [
    "Affine",
    "FlopCounter",
    "init_affine",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "top_k",
]


class FlopCounter:
    """Accumulator for multiply-add counts over one forward pass.

    Monotone within a pass; call :meth:`reset` between passes. Ownership is
    per forward pass -- the counter is not synchronized.
    """

    __slots__ = ("multiply_adds",)

    def __init__(self) -> None:
        self.multiply_adds = 0

    def add(self, count: int) -> None:
        if count < 0:
            raise ValueError(f"flop increment must be non-negative, got {count}")
        self.multiply_adds += int(count)

    def reset(self) -> None:
        self.multiply_adds = 0

    def __repr__(self) -> str:
        return f"FlopCounter(multiply_adds={self.multiply_adds})"


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """Matrix product ``a @ b``, counting rows(a) * cols(a) * cols(b) multiply-adds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} != {b.shape[0]}"
        )
    out = a @ b
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    if not np.isfinite(out).all():
        raise NumericsError("matmul produced non-finite entries")
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max subtraction before exp)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of empty input")
    if not np.isfinite(x).all():
        raise NumericsError("softmax requires finite logits")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores as a sorted array of distinct ints.

    Ties are broken toward the lowest index, so repeated calls on identical
    input always return the identical set.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"top_k expects a 1-D score vector, got shape {s.shape}")
    if np.isnan(s).any():
        raise NumericsError("top_k scores must not contain NaN")
    k = int(k)
    if not 0 <= k <= s.shape[0]:
        raise ShapeError(f"k={k} out of range for {s.shape[0]} scores")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Stable logistic function; only exponentiates non-positive arguments."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    return np.where(x >= 0, pos, 1.0 - pos)


@dataclass
class Affine:
    """Affine map ``x -> x @ weight.T + bias`` with weight shape (d_out, d_in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"affine expects 2-D weight and 1-D bias, got {self.weight.shape} and {self.bias.shape}"
            )
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def apply(self, x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
        """Apply to a (B, d_in) batch or a single (d_in,) vector."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        mat = x[None, :] if single else x
        out = matmul(mat, self.weight.T, counter) + self.bias
        return out[0] if single else out


def init_affine(
    rng: np.random.Generator,
    d_out: int,
    d_in: int,
    scale: float | None = None,
    bias_value: float = 0.0,
) -> Affine:
    """Zero-mean uniform init scaled by fan-in; bias starts at a constant."""
    s = (1.0 / np.sqrt(d_in)) if scale is None else scale
    weight = rng.uniform(-s, s, size=(d_out, d_in))
    return Affine(weight=weight, bias=np.full(d_out, float(bias_value)))
