"""Dense float64 arrays and the small set of kernels the rest of the package uses.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 and C (row-major)
order. Row-major order fixes the vectorization of fused outer products:
``outer(a, b).ravel()[i * len(b) + j] == a[i] * b[j]``.

Randomness goes through :func:`make_rng`, which wraps numpy's PCG64 bit
generator. Every consumer receives an explicit generator; nothing touches
numpy's global state.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyInputError(ValueError):
    """Raised when a reduction receives no elements."""


def as_tensor(values, *, check_finite: bool = True) -> Tensor:
    """Copy external input into a contiguous float64 array.

    NaN and Inf are rejected unless ``check_finite`` is False.
    """
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 0:
        raise ShapeError("tensor must have at least one dimension")
    if any(s <= 0 for s in arr.shape):
        raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded with a 64-bit unsigned integer."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def outer(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer expects two vectors, got {a.shape} and {b.shape}")
    return a[:, None] * b[None, :]


def sq_dist(a: Tensor, b: Tensor) -> float:
    """Squared Euclidean distance between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq_dists(x: Tensor, y: Tensor | None = None) -> Tensor:
    """Matrix of squared distances between rows of ``x`` and rows of ``y``.

    Computed from explicit differences (not the ``|x|^2 - 2xy + |y|^2``
    expansion) so the diagonal of ``pairwise_sq_dists(x)`` is exactly zero.
    """
    y = x if y is None else y
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"row widths differ: {x.shape} vs {y.shape}")
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def reduce_stats(values: Tensor) -> tuple[float, float]:
    """Mean and population standard deviation over all elements."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInputError("reduce_stats needs at least one element")
    mean = float(v.mean())
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return mean, std
