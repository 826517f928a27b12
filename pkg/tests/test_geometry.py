import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tryon.autodiff import Tensor, grad_check, ops
from tryon.geometry import (
    DegenerateCorrespondenceError,
    DegenerateForegroundError,
    GeometryError,
    Homography,
    NonInvertibleError,
    composite,
    quad_is_degenerate,
    soft_argmax,
    solve_homography,
    source_quad,
    warp,
)
from tryon.heatmap import render_gaussian


def random_quad(rng, side=64.0):
    """Perturbed axis-aligned box; rejects nearly collinear draws."""
    while True:
        x0, y0 = rng.uniform(0, side * 0.4, 2)
        w, h = rng.uniform(side * 0.2, side * 0.5, 2)
        q = np.array([[x0, y0], [x0 + w, y0], [x0, y0 + h], [x0 + w, y0 + h]])
        q += rng.normal(scale=side * 0.04, size=q.shape)
        if not quad_is_degenerate(q, tol=1e-2):
            return q


def brute_soft_argmax(h, beta):
    rows, cols = h.shape
    z = beta * h
    z = z - z.max()
    w = np.exp(z)
    w /= w.sum()
    x = sum(c * w[r, c] for r in range(rows) for c in range(cols))
    y = sum(r * w[r, c] for r in range(rows) for c in range(cols))
    return x, y


# -- soft-argmax ---------------------------------------------------------------

def test_soft_argmax_one_hot():
    h = np.zeros((32, 32))
    h[20, 10] = 1.0
    x, y = soft_argmax(Tensor(h)).data
    assert abs(x - 10) < 1e-9 and abs(y - 20) < 1e-9


def test_soft_argmax_constant_is_centroid():
    x, y = soft_argmax(Tensor(np.full((33, 33), 0.7))).data
    assert x == pytest.approx(16, abs=1e-12) and y == pytest.approx(16, abs=1e-12)


def test_soft_argmax_recovers_gaussian_center():
    h = render_gaussian((7.25, 9.5), (24, 24), 6)
    got = soft_argmax(Tensor(h), 1000.0).data
    want = brute_soft_argmax(h, 1000.0)
    np.testing.assert_allclose(got, want, atol=1e-9)
    assert np.hypot(got[0] - 7.25, got[1] - 9.5) < 0.5


def test_soft_argmax_batched_shape():
    h = np.random.default_rng(0).normal(size=(2, 4, 8, 8))
    assert soft_argmax(Tensor(h)).shape == (2, 4, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_soft_argmax_shift_invariant(seed, c):
    h = np.random.default_rng(seed).normal(scale=0.01, size=(9, 11))
    a = soft_argmax(Tensor(h), 50.0).data
    b = soft_argmax(Tensor(h + c), 50.0).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert 0 <= a[0] <= 10 and 0 <= a[1] <= 8


@pytest.mark.parametrize("seed", range(4))
def test_soft_argmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=0.002, size=(2, 6, 7)), requires_grad=True)
    w = rng.normal(size=(2, 2))
    rep = grad_check(lambda t: ops.sum(ops.mul(soft_argmax(t, 1000.0), w)), x, tol=1e-4)
    assert rep.passed, str(rep)


# -- source quad ---------------------------------------------------------------

def test_source_quad_examples():
    np.testing.assert_array_equal(source_quad(np.ones((64, 64))), [[0, 0], [63, 0], [0, 63], [63, 63]])
    m = np.zeros((20, 20))
    m[7, 5] = 1
    np.testing.assert_array_equal(source_quad(m), [[5, 7]] * 4)
    assert quad_is_degenerate(source_quad(m))
    m = np.zeros((64, 64))
    m[10:21, 30:51] = 1
    np.testing.assert_array_equal(source_quad(m), [[30, 10], [50, 10], [30, 20], [50, 20]])
    with pytest.raises(DegenerateForegroundError):
        source_quad(np.zeros((4, 4)))


# -- homography ------------------------------------------------------------------

def test_identity_and_translation_closed_forms():
    q = np.array([[3.0, 4.0], [40.0, 5.0], [2.0, 30.0], [45.0, 33.0]])
    np.testing.assert_allclose(solve_homography(q, q).m, np.eye(3), atol=1e-9)
    t = solve_homography(q, q + [5, 3]).m
    np.testing.assert_allclose(t, [[1, 0, 5], [0, 1, 3], [0, 0, 1]], atol=1e-9)


def test_homography_round_trip_random():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        src, dst = random_quad(rng), random_quad(rng)
        t = solve_homography(src, dst)
        worst = max(worst, np.abs(t.apply(src) - dst).max())
        assert t.m[2, 2] == 1.0
    assert worst < 1e-8


def test_degenerate_correspondence_rejected():
    src = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [5.0, 9.0]])
    dst = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    with pytest.raises(DegenerateCorrespondenceError):
        solve_homography(src, dst)
    with pytest.raises(DegenerateCorrespondenceError):
        solve_homography(np.full((4, 2), 5.0), dst)


def test_singular_homography_rejected():
    with pytest.raises(NonInvertibleError):
        Homography(np.array([[1.0, 2, 0], [2, 4, 0], [0, 0, 1]]))


# -- warping ---------------------------------------------------------------------

def test_warp_identity_exact():
    img = np.random.default_rng(0).uniform(size=(16, 12, 3))
    np.testing.assert_array_equal(warp(img, Homography.identity(), (16, 12)), img)


def test_warp_translation():
    img = np.random.default_rng(1).uniform(size=(20, 20))
    t = Homography(np.array([[1.0, 0, 5], [0, 1, 3], [0, 0, 1]]))
    out = warp(img, t, (20, 20))
    np.testing.assert_allclose(out[3:, 5:], img[:-3, :-5], atol=1e-12)
    assert not out[:3].any() and not out[:, :5].any()


def test_warp_scale_two_area():
    ys, xs = np.mgrid[0:128, 0:128]
    disk = (((xs - 20) ** 2 + (ys - 20) ** 2) <= 12**2).astype(float)
    t = Homography(np.diag([2.0, 2.0, 1.0]))
    out = warp(disk, t, (128, 128))
    assert abs(out.sum() - 4 * disk.sum()) / (4 * disk.sum()) < 0.02
    assert out.min() >= 0 and out.max() <= 1


def test_warp_round_trip_on_smooth_image():
    ys, xs = np.mgrid[0:64, 0:64] / 64.0
    img = 0.5 + 0.25 * np.sin(2 * np.pi * xs) * np.cos(2 * np.pi * ys)
    src = np.array([[0.0, 0.0], [63.0, 0.0], [0.0, 63.0], [63.0, 63.0]])
    dst = src + np.array([[2.0, 1.0], [-1.5, 2.0], [1.0, -2.0], [-2.0, -1.0]])
    t = solve_homography(src, dst)
    back = warp(warp(img, t, (64, 64)), t.inverse(), (64, 64))
    band = 2 + 3  # boundary band plus the corner displacement
    assert np.abs(back - img)[band:-band, band:-band].max() < 0.02


def test_warp_non_invertible():
    with pytest.raises(NonInvertibleError):
        warp(np.zeros((4, 4)), Homography(np.zeros((3, 3)) + np.eye(3) * [1, 0, 1]), (4, 4))


# -- compositing -----------------------------------------------------------------

def test_composite_examples():
    rng = np.random.default_rng(3)
    bg, fg = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(composite(bg, fg, np.zeros((8, 8))), bg)
    np.testing.assert_array_equal(composite(bg, fg, np.ones((8, 8))), fg)
    np.testing.assert_allclose(
        composite(np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.8), np.full((4, 4), 0.5)), 0.5, atol=1e-15
    )
    with pytest.raises(GeometryError):
        composite(bg, fg[:4], np.zeros((8, 8)))


def test_composite_zero_mask_bit_equal():
    rng = np.random.default_rng(4)
    bg, fg = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    m = rng.uniform(size=(16, 16))
    m[m < 0.5] = 0.0
    out = composite(bg, fg, m)
    assert np.array_equal(out[m == 0], bg[m == 0])
