"""Keypoint extraction, 4-point homographies, backward warping and compositing.

Coordinates are ``(x, y) = (column, row)`` with the origin at the centre of
the top-left pixel. Quads are ``(4, 2)`` arrays ordered A=top-left,
B=top-right, C=bottom-left, D=bottom-right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor

QUAD_NAMES = ("A", "B", "C", "D")
DEFAULT_BETA = 1000.0
MAX_CONDITION = 1e10


class GeometryError(ValueError):
    pass


class DegenerateForegroundError(GeometryError):
    pass


class DegenerateCorrespondenceError(GeometryError):
    pass


class NonInvertibleError(GeometryError):
    pass


def soft_argmax(h, beta: float = DEFAULT_BETA) -> Tensor:
    """Expected pixel coordinate under ``softmax(beta * h)`` over the last two axes.

    Returns a tensor of shape ``h.shape[:-2] + (2,)`` holding ``(x, y)``.
    """
    h = as_tensor(h)
    if h.ndim < 2 or h.size == 0:
        raise GeometryError(f"soft_argmax needs a non-empty heatmap, got shape {h.shape}")
    if beta <= 0:
        raise GeometryError(f"beta must be positive, got {beta}")
    rows, cols = h.shape[-2:]
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    prob = ops.spatial_softmax(ops.scalar_mul(h, beta))
    lead = h.shape[:-2]
    x = ops.reshape(ops.sum(ops.mul(prob, xs), axis=(-2, -1)), lead + (1,))
    y = ops.reshape(ops.sum(ops.mul(prob, ys), axis=(-2, -1)), lead + (1,))
    return ops.concat([x, y], axis=-1)


def source_quad(fg_mask: np.ndarray) -> np.ndarray:
    """Corners of the tight bounding box of the non-zero mask region."""
    m = np.asarray(fg_mask)
    if m.ndim == 3:
        m = m[..., 0]
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise DegenerateForegroundError("foreground mask is empty")
    x0, x1, y0, y1 = float(cols[0]), float(cols[-1]), float(rows[0]), float(rows[-1])
    return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])


def quad_is_degenerate(q: np.ndarray, tol: float = 1e-9) -> bool:
    """True when any three of the four points are (nearly) collinear."""
    q = np.asarray(q, dtype=np.float64)
    scale = max(np.ptp(q[:, 0]), np.ptp(q[:, 1]), 1.0)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u, v = q[j] - q[i], q[k] - q[i]
        if abs(u[0] * v[1] - u[1] * v[0]) <= tol * scale * scale:
            return True
    return False


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if m[2, 2] == 0 or not np.all(np.isfinite(m)):
            raise NonInvertibleError("homography must be finite with m[2][2] != 0")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise NonInvertibleError(f"homography is singular (det={np.linalg.det(m):.3e})")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        hom = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ self.m.T
        return hom[..., :2] / hom[..., 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def tolist(self) -> list[float]:
        return [float(v) for v in self.m.reshape(-1)]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def solve_homography(src, dst) -> Homography:
    """Exact 4-point direct linear transform with ``m[2][2] = 1``.

    Points are first normalized (centroid at origin, mean distance sqrt(2));
    a condition number above ``MAX_CONDITION`` for the normalized 8x8 system
    is reported as a degenerate correspondence.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateCorrespondenceError("non-finite keypoints")
    if quad_is_degenerate(src) or quad_is_degenerate(dst):
        raise DegenerateCorrespondenceError("three of the four points are collinear")
    ts, td = _normalizer(src), _normalizer(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k in range(4):
        x, y = s[k]
        u, v = d[k]
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k], rhs[2 * k + 1] = u, v
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateCorrespondenceError(f"correspondence system is ill-conditioned (cond={cond:.3e})")
    hn = np.append(np.linalg.solve(a, rhs), 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(td) @ hn @ ts)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at float coords; taps outside the image read 0."""
    h, w = img.shape[:2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(x.shape + img.shape[2:])
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(x.shape + img.shape[2:])
            vals[ok] = img[yi[ok], xi[ok]]
            out += wx * wy * vals
    return out


def warp(image: np.ndarray, t: Homography, out_size) -> np.ndarray:
    """Backward-warp ``image`` (H, W) or (H, W, C) with bilinear sampling and zero fill."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    oh, ow = out_size
    inv = t.inverse().m
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    good = np.abs(den) > 1e-12
    den = np.where(good, den, 1.0)
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    # points behind the camera plane or far outside map to nothing
    far = ~good | (den < 0) | (np.abs(sx) > 1e6) | (np.abs(sy) > 1e6)
    sx = np.where(far, -10.0, sx)
    sy = np.where(far, -10.0, sy)
    out = _bilinear(img, sx, sy)
    return out[..., 0] if squeeze else out


def composite(bg: np.ndarray, fg_warped: np.ndarray, mask_warped: np.ndarray) -> np.ndarray:
    """Alpha-blend the warped foreground over the background."""
    bg = np.asarray(bg, dtype=np.float64)
    fg = np.asarray(fg_warped, dtype=np.float64)
    m = np.asarray(mask_warped, dtype=np.float64)
    if bg.shape != fg.shape or bg.shape[:2] != m.shape[:2]:
        raise GeometryError(f"composite size mismatch: bg {bg.shape}, fg {fg.shape}, mask {m.shape}")
    if m.ndim == 2 and bg.ndim == 3:
        m = m[..., None]
    return m * fg + (1.0 - m) * bg


def warp_and_composite(bg, fg, fg_mask, t: Homography):
    """Returns ``(composite, warped_fg, warped_mask)`` on the background canvas."""
    size = np.asarray(bg).shape[:2]
    fw = warp(fg, t, size)
    mw = np.clip(warp(fg_mask, t, size), 0.0, 1.0)
    return composite(bg, fw, mw), fw, mw
