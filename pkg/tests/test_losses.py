import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rtn.losses import (DegenerateDataError, InsufficientDataError, KernelConfig,
                        count_sketch_matrix, entropy_grad, entropy_penalty, fuse, fuse_backward,
                        gaussian_kernel, median_heuristic, mmd2_grad, mmd2_linear,
                        mmd2_quadratic, mmd2_with_grad, resolve_bandwidth, sketch_compress)
from rtn.tensor import ShapeError, make_rng, outer, sq_dist


def naive_mmd2(zs, zt, b):
    def k(a, c):
        return math.exp(-sum((x - y) ** 2 for x, y in zip(a, c)) / b)
    ns, nt = len(zs), len(zt)
    ss = sum(k(zs[i], zs[j]) for i in range(ns) for j in range(ns)) / ns**2
    tt = sum(k(zt[i], zt[j]) for i in range(nt) for j in range(nt)) / nt**2
    st_ = sum(k(zs[i], zt[j]) for i in range(ns) for j in range(nt)) / (ns * nt)
    return ss + tt - 2 * st_


def unbiased_mmd2(zs, zt, b):
    def gram(a, c):
        return np.exp(-((a[:, None] - c[None]) ** 2).sum(-1) / b)
    ns, nt = len(zs), len(zt)
    kss, ktt = gram(zs, zs), gram(zt, zt)
    return ((kss.sum() - np.trace(kss)) / (ns * (ns - 1))
            + (ktt.sum() - np.trace(ktt)) / (nt * (nt - 1))
            - 2 * gram(zs, zt).mean())


def fd_grad(f, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


def max_rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# --- fusion ----------------------------------------------------------------------

def test_fuse_single_layer_passthrough(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(fuse([x]), x)


def test_fuse_hand_expansion():
    z = fuse([np.array([[1.0, 2.0]]), np.array([[3.0, 4.0, 5.0]])])
    np.testing.assert_array_equal(z, [[3, 4, 5, 6, 8, 10]])


def test_fuse_matches_per_row_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    expected = np.array([[a[r, i] * b[r, j] for i in range(4) for j in range(5)] for r in range(3)])
    np.testing.assert_array_equal(fuse([a, b]), expected)
    # same ordering as the tensor-core outer product, flattened row-major
    for r in range(3):
        np.testing.assert_array_equal(fuse([a, b])[r], outer(a[r], b[r]).ravel())


def test_fuse_three_layers_width(rng):
    feats = [rng.normal(size=(2, d)) for d in (2, 3, 4)]
    z = fuse(feats)
    assert z.shape == (2, 24)
    np.testing.assert_allclose(z[1], np.kron(np.kron(feats[0][1], feats[1][1]), feats[2][1]))


def test_fuse_batch_mismatch():
    with pytest.raises(ShapeError):
        fuse([np.ones((2, 3)), np.ones((3, 3))])
    with pytest.raises(ShapeError):
        fuse([])


@pytest.mark.parametrize("dims", [(4,), (3, 4), (2, 3, 2)])
def test_fuse_backward_finite_differences(rng, dims):
    feats = [rng.normal(size=(3, d)) for d in dims]
    w = rng.normal(size=(3, int(np.prod(dims))))
    grads = fuse_backward(feats, w)
    for k, f in enumerate(feats):
        def obj(v, k=k):
            fs = list(feats)
            fs[k] = v
            return float(np.sum(w * fuse(fs)))
        assert max_rel_err(grads[k], fd_grad(obj, f)) <= 1e-7


# --- kernel and bandwidth -------------------------------------------------------------

def test_kernel_identities(rng):
    z = rng.normal(size=6)
    assert gaussian_kernel(z, z, 2.0) == 1.0
    a, b = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    assert gaussian_kernel(a, b, 5.0) == math.exp(-1)


def test_kernel_composition_oracle(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    expected = math.exp(-sq_dist(a, b) / 3.7)
    assert abs(gaussian_kernel(a, b, 3.7) - expected) <= 1e-14 * expected


def test_kernel_rejects_bad_bandwidth():
    with pytest.raises(ValueError):
        gaussian_kernel(np.ones(2), np.ones(2), 0.0)
    with pytest.raises(ValueError):
        KernelConfig(bandwidth=-1)


@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)),
       st.floats(1.0, 100))
def test_kernel_range_and_symmetry(a, b, bw):
    k = gaussian_kernel(a, b, bw)
    assert 0 < k <= 1
    assert k == gaussian_kernel(b, a, bw)
    if np.array_equal(a, b):
        assert k == 1
    elif sq_dist(a, b) / bw > 1e-15:
        assert k < 1


def test_median_single_pair():
    assert median_heuristic(np.array([[0.0, 0.0], [2.0, 0.0]])) == 4.0


def test_median_hand_enumeration():
    assert median_heuristic(np.array([[0.0], [1.0], [3.0]])) == 4.0


def test_median_sort_all_pairs_oracle(rng):
    z = rng.normal(size=(10, 3))
    pairs = sorted(sq_dist(z[i], z[j]) for i in range(10) for j in range(i + 1, 10))
    m = len(pairs)
    expected = pairs[m // 2] if m % 2 else (pairs[m // 2 - 1] + pairs[m // 2]) / 2
    assert abs(median_heuristic(z) - expected) <= 1e-15 * expected


def test_median_errors():
    with pytest.raises(InsufficientDataError):
        median_heuristic(np.ones((1, 3)))
    with pytest.raises(DegenerateDataError):
        median_heuristic(np.ones((4, 3)))


def test_degenerate_batch_falls_back_to_unit_bandwidth(caplog):
    z = np.ones((3, 2))
    with caplog.at_level(logging.WARNING):
        assert resolve_bandwidth(z, z, KernelConfig()) == 1.0
    assert "degenerate" in caplog.text
    assert resolve_bandwidth(z, z, KernelConfig(2.5, "fixed")) == 2.5


# --- quadratic MMD -------------------------------------------------------------------------

def test_mmd_identical_sets_is_zero(rng):
    z = rng.normal(size=(8, 6))
    assert abs(mmd2_quadratic(z, z, 2.0)) <= 1e-12


def test_mmd_singletons(rng):
    a, b = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    expected = 2 * (1 - gaussian_kernel(a[0], b[0], 1.5))
    assert abs(mmd2_quadratic(a, b, 1.5) - expected) <= 1e-14


def test_mmd_matches_double_loop(rng):
    zs, zt = rng.normal(size=(8, 6)), rng.normal(0.5, 1.2, size=(8, 6))
    assert abs(mmd2_quadratic(zs, zt, 4.0) - naive_mmd2(zs, zt, 4.0)) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.floats(0.05, 50))
def test_mmd_nonnegative_and_symmetric(seed, ns, nt, bw):
    r = np.random.default_rng(seed)
    zs, zt = r.normal(size=(ns, 3)), r.normal(size=(nt, 3))
    v = mmd2_quadratic(zs, zt, bw)
    assert v >= -1e-12
    assert abs(v - mmd2_quadratic(zt, zs, bw)) <= 1e-14


def test_mmd_empty_set():
    with pytest.raises(InsufficientDataError):
        mmd2_quadratic(np.ones((0, 2)), np.ones((2, 2)), 1.0)


# --- linear-time MMD ------------------------------------------------------------------------

def test_linear_mmd_paired_cancellation(rng):
    z = rng.normal(size=(6, 4))
    assert mmd2_linear(z, z, 1.3) == 0.0


def test_linear_mmd_single_quadruple(rng):
    s, t = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    k = lambda a, b: gaussian_kernel(a, b, 2.0)
    expected = k(s[0], s[1]) + k(t[0], t[1]) - k(s[0], t[1]) - k(s[1], t[0])
    assert abs(mmd2_linear(s, t, 2.0) - expected) <= 1e-15


def test_linear_mmd_unbiased_in_expectation():
    r = np.random.default_rng(7)
    zs, zt = r.normal(size=(20, 3)), r.normal(0.4, 1.0, size=(20, 3))
    draws = np.array([mmd2_linear(zs[r.permutation(20)], zt[r.permutation(20)], 3.0)
                      for _ in range(200)])
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - unbiased_mmd2(zs, zt, 3.0)) <= 3 * se


def test_linear_mmd_shape_errors():
    with pytest.raises(ShapeError):
        mmd2_linear(np.ones((3, 2)), np.ones((3, 2)), 1.0)
    with pytest.raises(ShapeError):
        mmd2_linear(np.ones((2, 2)), np.ones((4, 2)), 1.0)


# --- gradients -------------------------------------------------------------------------------

@pytest.mark.parametrize("estimator", ["quadratic", "linear"])
def test_mmd_grad_finite_differences(rng, estimator):
    zs, zt = rng.normal(size=(4, 3)), rng.normal(0.3, 1.0, size=(4, 3))
    f = mmd2_quadratic if estimator == "quadratic" else mmd2_linear
    gs, gt = mmd2_grad(zs, zt, 2.5, estimator)
    assert max_rel_err(gs, fd_grad(lambda v: f(v, zt, 2.5), zs)) <= 1e-6
    assert max_rel_err(gt, fd_grad(lambda v: f(zs, v, 2.5), zt)) <= 1e-6


@pytest.mark.parametrize("estimator", ["quadratic", "linear"])
def test_mmd_grad_translation_invariance(rng, estimator):
    z = rng.normal(size=(6, 4))
    gs, gt = mmd2_grad(z, z, 1.0, estimator)
    assert abs(np.sum(gs + gt)) <= 1e-10
    zs, zt = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    gs, gt = mmd2_grad(zs, zt, 1.0, estimator)
    np.testing.assert_allclose(gs.sum(axis=0) + gt.sum(axis=0), 0, atol=1e-12)


def test_mmd_grad_constant_kernel_limit(rng):
    zs, zt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    for estimator in ("quadratic", "linear"):
        gs, gt = mmd2_grad(zs, zt, 1e15, estimator)
        assert np.max(np.abs(gs)) <= 1e-10 and np.max(np.abs(gt)) <= 1e-10


@pytest.mark.parametrize("estimator", ["quadratic", "linear"])
def test_with_grad_agrees_with_separate_calls(rng, estimator):
    zs, zt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    value, gs, gt, b = mmd2_with_grad(zs, zt, KernelConfig(), estimator=estimator)
    assert b == median_heuristic(np.vstack([zs, zt]))
    f = mmd2_quadratic if estimator == "quadratic" else mmd2_linear
    assert value == pytest.approx(f(zs, zt, b), abs=1e-14)
    es, et = mmd2_grad(zs, zt, b, estimator)
    np.testing.assert_allclose(gs, es, atol=1e-14)
    np.testing.assert_allclose(gt, et, atol=1e-14)


# --- entropy ---------------------------------------------------------------------------------

def test_entropy_cases():
    assert entropy_penalty(np.eye(3)) == 0.0
    assert abs(entropy_penalty(np.full((2, 5), 0.2)) - math.log(5)) <= 1e-12
    row = [0.5, 0.25, 0.25]
    direct = -sum(p * math.log(p) for p in row)
    assert abs(entropy_penalty(np.array([row])) - direct) <= 1e-15
    assert abs(direct - 1.5 * math.log(2)) <= 1e-15
    assert entropy_penalty(np.array([row])) == pytest.approx(1.0397208, abs=1e-7)


@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_entropy_bounds(seed, c):
    p = np.random.default_rng(seed).dirichlet(np.full(c, 0.3), size=4)
    h = entropy_penalty(p)
    assert 0 <= h <= math.log(c) + 1e-12


def test_entropy_rejects_non_simplex():
    with pytest.raises(ValueError):
        entropy_penalty(np.array([[0.5, 0.6]]))


def test_entropy_grad_finite_differences(rng):
    p = rng.dirichlet(np.ones(4), size=3)
    g = entropy_grad(p)
    # perturbing one entry leaves the simplex, so differentiate the unchecked formula
    raw = lambda q: float(-np.sum(q * np.log(q)) / len(q))
    assert max_rel_err(g, fd_grad(raw, p, h=1e-7)) <= 1e-6


# --- sketching -------------------------------------------------------------------------------

def test_identity_sketch(rng):
    z = rng.normal(size=(3, 6))
    np.testing.assert_array_equal(sketch_compress(z, 6), z)


def test_sketch_preserves_inner_products_in_expectation():
    r = np.random.default_rng(11)
    a = r.normal(size=40)
    b = a + 0.5 * r.normal(size=40)
    true = a @ b
    gen = make_rng(5)
    est = [float(np.prod(sketch_compress(np.stack([a, b]), 16, gen), axis=0).sum()) for _ in range(500)]
    assert abs(np.mean(est) - true) <= 0.05 * abs(true)


def test_sketch_deterministic_and_validates(rng):
    z = rng.normal(size=(2, 12))
    np.testing.assert_array_equal(sketch_compress(z, 5, make_rng(3)), sketch_compress(z, 5, make_rng(3)))
    with pytest.raises(ValueError):
        sketch_compress(z, 0, make_rng(3))
    m = count_sketch_matrix(12, 5, make_rng(1))
    assert np.all(np.abs(m).sum(axis=1) == 1)
