"""Feature fusion, Gaussian-kernel MMD, entropy penalty, and their gradients.

Every MMD function treats the bandwidth ``b`` as a constant: gradients never
flow through the median heuristic.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass

import numpy as np

from .network import PROB_EPS
from .tensor import ShapeError, Tensor, pairwise_sq_dists, sq_dist

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float = 1.0
    policy: str = "median_per_batch"  # or "fixed"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.policy not in ("median_per_batch", "fixed"):
            raise ValueError(f"unknown bandwidth policy {self.policy!r}")


# --- fusion -----------------------------------------------------------------

def _check_batch(feats):
    if not feats:
        raise ShapeError("fuse needs at least one feature tensor")
    n = feats[0].shape[0]
    for f in feats:
        if f.ndim != 2 or f.shape[0] != n:
            raise ShapeError(f"batch sizes differ: {[f.shape for f in feats]}")
    return n


def fuse(per_layer_feats: list[Tensor]) -> Tensor:
    """Row-wise vectorized tensor product of per-layer features.

    Row ``i`` of the result is ``vec(x1_i ⊗ x2_i ⊗ ...)`` in row-major order,
    so its width is the product of the layer widths.
    """
    feats = [np.asarray(f, dtype=np.float64) for f in per_layer_feats]
    n = _check_batch(feats)
    z = feats[0]
    for f in feats[1:]:
        z = (z[:, :, None] * f[:, None, :]).reshape(n, -1)
    return z


def fuse_backward(per_layer_feats: list[Tensor], grad_fused: Tensor) -> list[Tensor]:
    """Split a gradient w.r.t. fused rows back onto each participating layer."""
    feats = [np.asarray(f, dtype=np.float64) for f in per_layer_feats]
    n = _check_batch(feats)
    if len(feats) == 1:
        return [np.asarray(grad_fused, dtype=np.float64)]
    letters = string.ascii_letters[1:len(feats) + 1]
    g = np.asarray(grad_fused).reshape(n, *(f.shape[1] for f in feats))
    grads = []
    for k in range(len(feats)):
        operands = [f"a{letters}"] + [f"a{letters[j]}" for j in range(len(feats)) if j != k]
        spec = ",".join(operands) + f"->a{letters[k]}"
        others = [feats[j] for j in range(len(feats)) if j != k]
        grads.append(np.einsum(spec, g, *others))
    return grads


# --- kernel and bandwidth ---------------------------------------------------

def gaussian_kernel(z: Tensor, z2: Tensor, b: float) -> float:
    """``exp(-|vec(z) - vec(z2)|^2 / b)``."""
    if not b > 0:
        raise ValueError(f"bandwidth must be positive, got {b}")
    return float(np.exp(-sq_dist(z, z2) / b))


def median_heuristic(fused: Tensor) -> float:
    """Median of the n(n-1)/2 distinct pairwise squared distances between rows."""
    fused = np.asarray(fused, dtype=np.float64)
    n = fused.shape[0]
    if n < 2:
        raise InsufficientDataError(f"median heuristic needs >= 2 rows, got {n}")
    return _median_offdiag(pairwise_sq_dists(fused))


def _median_offdiag(d):
    b = float(np.median(d[np.triu_indices(d.shape[0], k=1)]))
    if b <= 0:
        raise DegenerateDataError("all pairwise distances are zero")
    return b


def resolve_bandwidth(zs: Tensor, zt: Tensor, cfg: KernelConfig, sq_dists=None) -> float:
    """Bandwidth for one batch under ``cfg``; degenerate batches fall back to 1.

    ``sq_dists`` may carry the precomputed distance matrix of ``vstack([zs, zt])``.
    """
    if cfg.policy == "fixed":
        return cfg.bandwidth
    try:
        if sq_dists is None:
            return median_heuristic(np.vstack([zs, zt]))
        return _median_offdiag(sq_dists)
    except DegenerateDataError:
        log.warning("degenerate batch for median heuristic; using fixed bandwidth 1.0")
        return 1.0


# --- MMD --------------------------------------------------------------------

def _check_sets(zs, zt):
    zs = np.asarray(zs, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    if zs.ndim != 2 or zt.ndim != 2 or zs.shape[0] < 1 or zt.shape[0] < 1:
        raise InsufficientDataError(f"MMD needs two non-empty sets, got {zs.shape}, {zt.shape}")
    if zs.shape[1] != zt.shape[1]:
        raise ShapeError(f"feature widths differ: {zs.shape[1]} vs {zt.shape[1]}")
    return zs, zt


def _weights(ns, nt):
    w = np.empty((ns + nt, ns + nt))
    w[:ns, :ns] = 1.0 / ns**2
    w[ns:, ns:] = 1.0 / nt**2
    w[:ns, ns:] = -1.0 / (ns * nt)
    w[ns:, :ns] = -1.0 / (ns * nt)
    return w


def mmd2_quadratic(zs: Tensor, zt: Tensor, b: float) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel of bandwidth ``b``."""
    zs, zt = _check_sets(zs, zt)
    if not b > 0:
        raise ValueError(f"bandwidth must be positive, got {b}")
    ns, nt = len(zs), len(zt)
    k_ss = np.exp(-pairwise_sq_dists(zs) / b)
    k_tt = np.exp(-pairwise_sq_dists(zt) / b)
    k_st = np.exp(-pairwise_sq_dists(zs, zt) / b)
    return float(k_ss.sum() / ns**2 + k_tt.sum() / nt**2 - 2.0 * k_st.sum() / (ns * nt))


def _check_linear(zs, zt):
    zs, zt = _check_sets(zs, zt)
    if len(zs) != len(zt) or len(zs) % 2:
        raise ShapeError(f"linear MMD needs equal even batch sizes, got {len(zs)} and {len(zt)}")
    return zs, zt


def _row_kernel(x, y, b):
    d = x - y
    return np.exp(-np.einsum("ij,ij->i", d, d) / b), d


def mmd2_linear(zs: Tensor, zt: Tensor, b: float) -> float:
    """Linear-time unbiased MMD estimate over consecutive row pairs; may be negative."""
    zs, zt = _check_linear(zs, zt)
    s1, s2, t1, t2 = zs[0::2], zs[1::2], zt[0::2], zt[1::2]
    h = (_row_kernel(s1, s2, b)[0] + _row_kernel(t1, t2, b)[0]
         - _row_kernel(s1, t2, b)[0] - _row_kernel(s2, t1, b)[0])
    return float(h.mean())


def mmd2_grad(zs: Tensor, zt: Tensor, b: float, estimator: str = "quadratic"):
    """Gradients ``(d/dzs, d/dzt)`` of the chosen MMD estimator."""
    if estimator == "quadratic":
        zs, zt = _check_sets(zs, zt)
        ns = len(zs)
        z = np.vstack([zs, zt])
        a = _weights(ns, len(zt)) * np.exp(-pairwise_sq_dists(z) / b)
        grad = (-4.0 / b) * (a.sum(axis=1)[:, None] * z - a @ z)
        return grad[:ns], grad[ns:]
    if estimator == "linear":
        zs, zt = _check_linear(zs, zt)
        m = len(zs) // 2
        gs, gt = np.zeros_like(zs), np.zeros_like(zt)
        s1, s2, t1, t2 = zs[0::2], zs[1::2], zt[0::2], zt[1::2]
        # d/dx of sign * k(x, y) / m is sign * (-2/b) k (x - y) / m; d/dy is its negation
        for x, y, gx, gy, sign in ((s1, s2, gs[0::2], gs[1::2], 1.0),
                                   (t1, t2, gt[0::2], gt[1::2], 1.0),
                                   (s1, t2, gs[0::2], gt[1::2], -1.0),
                                   (s2, t1, gs[1::2], gt[0::2], -1.0)):
            k, d = _row_kernel(x, y, b)
            g = sign * (-2.0 / b) * k[:, None] * d / m
            gx += g
            gy -= g
        return gs, gt
    raise ValueError(f"unknown estimator {estimator!r}")


def mmd2_with_grad(zs: Tensor, zt: Tensor, cfg: KernelConfig, b: float | None = None,
                   estimator: str = "quadratic"):
    """Value and gradients in one pass, sharing a single distance matrix.

    ``b=None`` applies ``cfg``'s bandwidth policy to the combined batch.
    Returns ``(value, grad_zs, grad_zt, b)``.
    """
    zs, zt = _check_sets(zs, zt)
    if estimator == "linear":
        if b is None:
            b = resolve_bandwidth(zs, zt, cfg)
        return (mmd2_linear(zs, zt, b), *mmd2_grad(zs, zt, b, "linear"), b)
    if estimator != "quadratic":
        raise ValueError(f"unknown estimator {estimator!r}")
    ns = len(zs)
    z = np.vstack([zs, zt])
    d = pairwise_sq_dists(z)
    if b is None:
        b = resolve_bandwidth(zs, zt, cfg, sq_dists=d)
    a = _weights(ns, len(zt)) * np.exp(-d / b)
    value = float(a.sum())
    grad = (-4.0 / b) * (a.sum(axis=1)[:, None] * z - a @ z)
    return value, grad[:ns], grad[ns:], b


def mmd2(zs: Tensor, zt: Tensor, b: float, estimator: str = "quadratic") -> float:
    if estimator == "quadratic":
        return mmd2_quadratic(zs, zt, b)
    if estimator == "linear":
        return mmd2_linear(zs, zt, b)
    raise ValueError(f"unknown estimator {estimator!r}")


# --- entropy ----------------------------------------------------------------

def _check_simplex(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"expected a [batch x classes] matrix, got {probs.shape}")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    return probs


def entropy_penalty(probs: Tensor) -> float:
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    p = _check_simplex(probs)
    # the trailing + 0.0 turns -0.0 (one-hot rows) into 0.0
    return float(-np.sum(p * np.log(np.maximum(p, PROB_EPS))) / len(p)) + 0.0


def entropy_grad(probs: Tensor) -> Tensor:
    """Gradient of :func:`entropy_penalty` w.r.t. ``probs``."""
    p = _check_simplex(probs)
    g = np.where(p > PROB_EPS, -(np.log(np.maximum(p, PROB_EPS)) + 1.0), -np.log(PROB_EPS))
    return g / len(p)


# --- count sketch -----------------------------------------------------------

def count_sketch_matrix(in_dim: int, target_dim: int, rng=None) -> Tensor:
    """Dense ``[in_dim x target_dim]`` count-sketch projection.

    Each input coordinate is hashed to one output bucket with a random sign,
    which preserves inner products in expectation. With ``rng=None`` the
    identity hashing is used (requires ``target_dim == in_dim``).
    """
    if target_dim < 1:
        raise ValueError(f"target_dim must be >= 1, got {target_dim}")
    if rng is None:
        if target_dim != in_dim:
            raise ValueError("identity sketch requires target_dim == input width")
        return np.eye(in_dim)
    buckets = rng.integers(0, target_dim, size=in_dim)
    signs = rng.integers(0, 2, size=in_dim) * 2.0 - 1.0
    m = np.zeros((in_dim, target_dim))
    m[np.arange(in_dim), buckets] = signs
    return m


def sketch_compress(fused: Tensor, target_dim: int, rng=None) -> Tensor:
    fused = np.asarray(fused, dtype=np.float64)
    return fused @ count_sketch_matrix(fused.shape[1], target_dim, rng)
