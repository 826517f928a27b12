"""Composite quality metrics: local SSIM, warped-mask IoU and vertex displacement."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LSSIM_MARGIN = 5


class NonConvexQuadError(ValueError):
    pass


@dataclass
class EvalResult:
    lssim: float
    iou: float
    disp: float

    def as_dict(self) -> dict:
        return asdict(self)


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable filter over the first two axes with symmetric padding."""
    p = len(k) // 2
    x = np.pad(img, ((p, p), (0, 0), (0, 0)), mode="symmetric")
    x = sliding_window_view(x, len(k), axis=0) @ k
    x = np.pad(x, ((0, 0), (p, p), (0, 0)), mode="symmetric")
    return sliding_window_view(x, len(k), axis=1) @ k


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window (sigma 1.5), data range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _gauss_kernel()
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    saa = _blur(a * a, k) - mu_a * mu_a
    sbb = _blur(b * b, k) - mu_b * mu_b
    sab = _blur(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def local_region(mask_a: np.ndarray, mask_b: np.ndarray, margin: int = LSSIM_MARGIN):
    """Row/column slices of the dilated union bounding box, or None if both masks are empty."""
    union = (np.asarray(mask_a) >= 0.5) | (np.asarray(mask_b) >= 0.5)
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    if rows.size == 0:
        return None
    h, w = union.shape
    return (
        slice(max(rows[0] - margin, 0), min(rows[-1] + margin, h - 1) + 1),
        slice(max(cols[0] - margin, 0), min(cols[-1] + margin, w - 1) + 1),
    )


def lssim(pred_composite, gt_composite, gt_mask_warped, pred_mask_warped, return_flag: bool = False):
    """Mean SSIM over the accessory region of the two composites.

    The region is the bounding box of the union of both warped masks,
    grown by ``LSSIM_MARGIN`` pixels. With both masks empty the whole
    canvas is used and the flag (second return value) is set.
    """
    region = local_region(gt_mask_warped, pred_mask_warped)
    smap = ssim_map(pred_composite, gt_composite)
    whole = region is None
    if whole:
        warnings.warn("LSSIM: both warped masks are empty, evaluating the whole canvas", RuntimeWarning)
        value = float(smap.mean())
    else:
        value = float(smap[region[0], region[1]].mean())
    return (value, whole) if return_flag else value


def mask_iou(pred_mask_warped, gt_mask_warped, threshold: float = 0.5) -> float:
    p = np.asarray(pred_mask_warped) >= threshold
    g = np.asarray(gt_mask_warped) >= threshold
    union = np.count_nonzero(p | g)
    if union == 0:
        return 0.0
    return np.count_nonzero(p & g) / union


def disp(pred_quad, gt_quad, canvas_side: float) -> float:
    """Mean corner distance divided by the canvas side."""
    p = np.asarray(pred_quad, dtype=np.float64).reshape(4, 2)
    g = np.asarray(gt_quad, dtype=np.float64).reshape(4, 2)
    return float(np.mean(np.sqrt(((p - g) ** 2).sum(axis=1))) / canvas_side)


# -- polygon oracle ----------------------------------------------------------------

def quad_polygon(q) -> np.ndarray:
    """A,B,C,D (TL,TR,BL,BR) corners as a boundary-ordered polygon A,B,D,C."""
    q = np.asarray(q, dtype=np.float64).reshape(4, 2)
    return q[[0, 1, 3, 2]]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _orientation(poly: np.ndarray) -> np.ndarray:
    """Cross products at each vertex; all the same sign iff the polygon is strictly convex."""
    e = np.roll(poly, -1, axis=0) - poly
    en = np.roll(e, -1, axis=0)
    return e[:, 0] * en[:, 1] - e[:, 1] * en[:, 0]


def is_convex(poly: np.ndarray) -> bool:
    c = _orientation(poly)
    return bool(np.all(c > 0) or np.all(c < 0))


def _clip(subject: list, a: np.ndarray, b: np.ndarray, sign: float) -> list:
    def inside(p):
        return sign * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) >= 0

    def cross_point(p, q):
        d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        t = d1 / (d1 - d2)
        return p + t * (q - p)

    out = []
    for i, cur in enumerate(subject):
        prev = subject[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(cross_point(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(cross_point(prev, cur))
    return out


def quad_iou_oracle(pred_quad, gt_quad) -> float:
    """Exact IoU of two convex quads by Sutherland-Hodgman clipping."""
    p, g = quad_polygon(pred_quad), quad_polygon(gt_quad)
    if not (is_convex(p) and is_convex(g)):
        raise NonConvexQuadError("quad IoU oracle only handles convex quads")
    sign = 1.0 if _orientation(g)[0] > 0 else -1.0
    inter = [v for v in p]
    for i in range(4):
        if not inter:
            break
        inter = _clip(inter, g[i], g[(i + 1) % 4], sign)
    ia = polygon_area(np.array(inter)) if len(inter) >= 3 else 0.0
    union = polygon_area(p) + polygon_area(g) - ia
    return ia / union if union > 0 else 0.0


def rasterize_quad(q, size) -> np.ndarray:
    """Binary mask of pixel centres inside a convex quad."""
    poly = quad_polygon(q)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c = _orientation(poly)
    sign = 1.0 if c[0] > 0 else -1.0
    inside = np.ones((h, w), dtype=bool)
    for i in range(4):
        a, b = poly[i], poly[(i + 1) % 4]
        cr = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside &= sign * cr >= 0
    return inside.astype(np.float64)
