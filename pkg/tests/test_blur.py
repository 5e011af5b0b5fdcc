import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdeblur.blur import (BlurOperator, KernelRadiusError, apply, apply_adjoint, blur_at, build_kernel,
                           identity_operator, synthesize_blur)

seeds = st.integers(0, 2 ** 31 - 1)


def single(ff, fb, tau=0.23):
    f = np.array(ff, float).reshape(1, 1, 2)
    b = np.array(fb, float).reshape(1, 1, 2)
    return dict(build_kernel(f, b, tau).kernel_at(0, 0))


def dense_oracle(ff, fb, tau, density=100):
    """Kernel rasterized with ``density`` samples per pixel of travel, bilinear splat, unit sum."""
    taps: dict = {}
    for f in (ff, fb):
        seg = tau * np.asarray(f, float)
        n = int(np.ceil(density * np.hypot(*seg))) + 1
        for t in np.linspace(0, 1, n) if n > 1 else [0.0]:
            x, y = t * seg
            fx, fy = np.floor(x), np.floor(y)
            ax, ay = x - fx, y - fy
            for ox, oy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                              (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
                if w > 0:
                    k = (int(fx + ox), int(fy + oy))
                    taps[k] = taps.get(k, 0.0) + w / n
    s = sum(taps.values())
    return {k: v / s for k, v in taps.items()}


def moments(taps):
    off = np.array(list(taps.keys()), float)
    w = np.array(list(taps.values()))
    mean = w @ off
    return mean, w @ ((off - mean) ** 2)


def random_operator(rng, h, w, max_flow=3.0):
    ff = rng.uniform(-max_flow, max_flow, (h, w, 2))
    fb = rng.uniform(-max_flow, max_flow, (h, w, 2))
    return build_kernel(ff, fb, 0.5)


def test_zero_flow_gives_delta_kernel():
    assert single((0, 0), (0, 0)) == {(0, 0): 1.0}


def test_symmetric_horizontal_kernel():
    k = single((10, 0), (-10, 0))
    assert sum(k.values()) == pytest.approx(1, abs=1e-12)
    assert all(dy == 0 for _, dy in k)
    assert min(dx for dx, _ in k) >= -3 and max(dx for dx, _ in k) <= 3
    for (dx, dy), w in k.items():
        assert k[(-dx, dy)] == pytest.approx(w, abs=1e-12)


@pytest.mark.parametrize("ff, fb", [((10, 0), (-10, 0)), ((10, 0), (0, 0)), ((3.3, -7.1), (-2, 4.4))])
def test_kernel_matches_dense_rasterization(ff, fb):
    k = single(ff, fb)
    o = dense_oracle(ff, fb, 0.23)
    assert set(k) == {q for q, v in o.items() if v > 1e-12}
    # 2 samples per pixel of travel against 100: per-tap weights differ by splat aliasing only
    assert max(abs(k.get(q, 0) - o.get(q, 0)) for q in set(k) | set(o)) <= 0.06
    (mk, vk), (mo, vo) = moments(k), moments(o)
    np.testing.assert_allclose(mk, mo, atol=1e-9)
    np.testing.assert_allclose(np.sqrt(vk), np.sqrt(vo), atol=0.1)  # spread in px


def test_one_sided_kernel():
    k = single((10, 0), (0, 0))
    assert set(k) == {(0, 0), (1, 0), (2, 0), (3, 0)}
    assert k[(0, 0)] > 0.5  # the zero branch adds its whole mass at the origin


def test_non_finite_flow_names_pixel():
    ff = np.zeros((3, 4, 2))
    ff[2, 1, 0] = np.nan
    with pytest.raises(ValueError, match=r"x=1, y=2"):
        build_kernel(ff, np.zeros_like(ff), 0.23)


def test_kernel_radius_limit():
    ff = np.full((2, 2, 2), 400.0)
    with pytest.raises(KernelRadiusError):
        build_kernel(ff, -ff, 0.23)


@pytest.mark.parametrize("tau", [0.0, 0.6])
def test_tau_range(tau):
    with pytest.raises(ValueError):
        build_kernel(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), tau)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_kernels_sum_to_one_and_preserve_constants(seed):
    rng = np.random.default_rng(seed)
    op = random_operator(rng, 6, 7, max_flow=8.0)
    sums = np.bincount(op.tap_pixel, weights=op.tap_w, minlength=42)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    assert np.all(op.tap_w >= 0)
    np.testing.assert_allclose(apply(op, np.full((6, 7, 3), 0.37)), 0.37, atol=1e-12)


def test_identity_operator_is_identity():
    L = np.random.default_rng(0).random((5, 6, 3))
    op = build_kernel(np.zeros((5, 6, 2)), np.zeros((5, 6, 2)), 0.23)
    np.testing.assert_array_equal(apply(op, L), L)
    np.testing.assert_array_equal(apply_adjoint(op, L), L)
    np.testing.assert_array_equal(apply(identity_operator(5, 6), L), L)


def brute_dense(op: BlurOperator) -> np.ndarray:
    h, w = op.height, op.width
    M = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            for (dx, dy), wt in op.kernel_at(x, y):
                cx = min(max(x + dx, 0), w - 1)
                cy = min(max(y + dy, 0), h - 1)
                M[y * w + x, cy * w + cx] += wt
    return M


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(2, 8), st.integers(2, 8))
def test_apply_matches_dense_matrix(seed, h, w):
    rng = np.random.default_rng(seed)
    op = random_operator(rng, h, w)
    L = rng.random((h, w, 1))
    want = brute_dense(op) @ L.ravel()
    np.testing.assert_allclose(apply(op, L).ravel(), want, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_adjoint_inner_product(seed):
    rng = np.random.default_rng(seed)
    op = random_operator(rng, 6, 6)
    L = rng.standard_normal((6, 6, 3))
    r = rng.standard_normal((6, 6, 3))
    lhs = np.sum(apply(op, L) * r)
    rhs = np.sum(L * apply_adjoint(op, r))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_adjoint_of_shift_is_reverse_shift():
    h, w = 4, 5
    n = h * w
    op = BlurOperator(h, w, np.arange(n), np.ones(n, dtype=np.intp), np.zeros(n, dtype=np.intp),
                      np.ones(n))
    r = np.random.default_rng(3).random((h, w, 1))
    out = apply_adjoint(op, r)
    # interior columns receive exactly the residual of their left neighbour
    np.testing.assert_allclose(out[:, 1:w - 1], r[:, 0:w - 2])
    assert np.all(out[:, 0] == 0)


def test_dimension_mismatch():
    op = identity_operator(3, 3)
    with pytest.raises(ValueError):
        apply(op, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        apply_adjoint(op, np.zeros((3, 4)))


def test_blur_at_matches_operator():
    rng = np.random.default_rng(5)
    h, w = 9, 11
    ff = rng.uniform(-6, 6, (h, w, 2))
    fb = rng.uniform(-6, 6, (h, w, 2))
    L = rng.random((h, w, 1))
    full = apply(build_kernel(ff, fb, 0.23), L)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = blur_at(L, xs, ys, ff.reshape(-1, 2), fb.reshape(-1, 2), 0.23)
    np.testing.assert_allclose(pts.reshape(h, w, 1), full, atol=1e-12)


def test_synthesize_blur_examples():
    f = np.random.default_rng(0).random((4, 4))
    np.testing.assert_allclose(synthesize_blur([f, f, f]), f, atol=1e-15)
    consts = [np.full((2, 2), v) for v in (0.0, 0.5, 1.0)]
    np.testing.assert_allclose(synthesize_blur(consts), 0.5)
    with pytest.raises(ValueError):
        synthesize_blur([f, f])
    with pytest.raises(ValueError):
        synthesize_blur([f, f, np.zeros((3, 3))])
