"""Ground-truth heatmap rendering and heatmap supervision losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor

VARIANTS = ("weighted-awing", "awing", "weighted-mse", "mse")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AWingParams:
    omega: float = 14.0
    alpha: float = 2.1
    theta: float = 0.5
    epsilon: float = 1.0

    def __post_init__(self):
        if self.omega <= 0 or self.theta <= 0 or self.epsilon <= 0 or self.alpha <= 1:
            raise ConfigError(f"invalid AWing parameters {self}")

    def coefficients(self, y):
        """Per-pixel ``(A, B)`` making the loss continuous and smooth at ``|y - y_hat| = theta``."""
        y = np.asarray(y, dtype=np.float64)
        e = self.alpha - y
        r = self.theta / self.epsilon
        a = self.omega * (1.0 / (1.0 + r ** e)) * e * (r ** (e - 1.0)) * (1.0 / self.epsilon)
        b = self.theta * a - self.omega * np.log1p(r ** e)
        return a, b


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 10.0
    lam: float = 0.1
    # None -> 20 px at 224 scaled to the working canvas
    gaussian_radius: Optional[int] = None
    variant: str = "weighted-awing"
    awing: AWingParams = field(default_factory=AWingParams)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant '{self.variant}', expected one of {VARIANTS}")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lambda must be non-negative")
        if self.gaussian_radius is not None and self.gaussian_radius <= 0:
            raise ConfigError(f"gaussian radius must be positive, got {self.gaussian_radius}")

    @property
    def weighted(self) -> bool:
        return self.variant.startswith("weighted")

    def radius_for(self, side: int) -> int:
        if self.gaussian_radius is not None:
            return int(self.gaussian_radius)
        return max(1, round(20 * side / 224))


def render_gaussian(center, size, g: float) -> np.ndarray:
    """Truncated Gaussian bump with peak 1 at ``center = (x, y)``.

    ``sigma = g / 3``; pixels farther than ``g`` from the center are zero.
    Pixel ``(row, col)`` sits at coordinate ``(x=col, y=row)``.
    """
    if g <= 0:
        raise ConfigError(f"gaussian radius must be positive, got {g}")
    h, w = size
    cx, cy = float(center[0]), float(center[1])
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    sigma = g / 3.0
    out = np.exp(-d2 / (2.0 * sigma * sigma))
    out[d2 > g * g] = 0.0
    return out


def render_quad_heatmaps(quad, size, g: float) -> np.ndarray:
    """Four heatmaps (A, B, C, D order) for a (4, 2) array of target points."""
    return np.stack([render_gaussian(p, size, g) for p in np.asarray(quad)])


def dilate3x3(h: np.ndarray) -> np.ndarray:
    """Grey dilation with a 3x3 box over the last two axes, zero padded."""
    h = np.asarray(h, dtype=np.float64)
    pad = [(0, 0)] * (h.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(h, pad)
    hh, ww = h.shape[-2:]
    out = p[..., 0:hh, 0:ww].copy()
    for i in range(3):
        for j in range(3):
            np.maximum(out, p[..., i:i + hh, j:j + ww], out=out)
    return out


def positive_mask(h_dilated: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    return (np.asarray(h_dilated) >= threshold).astype(np.float64)


@dataclass
class HeatmapSet:
    gt: np.ndarray
    pred: Tensor
    pos_mask: np.ndarray

    def __post_init__(self):
        if self.gt.shape != self.pred.shape or self.gt.shape != self.pos_mask.shape:
            raise ValueError(
                f"heatmap shapes differ: gt {self.gt.shape}, pred {self.pred.shape}, mask {self.pos_mask.shape}"
            )

    @classmethod
    def from_gt(cls, gt: np.ndarray, pred) -> "HeatmapSet":
        gt = np.asarray(gt, dtype=np.float64)
        return cls(gt, as_tensor(pred), positive_mask(dilate3x3(gt)))


def awing(y, y_hat, params: AWingParams = AWingParams()) -> Tensor:
    """Elementwise adaptive wing loss between targets ``y`` and predictions ``y_hat``.

    ``y`` is constant; the exponent ``alpha - y`` follows the target value
    at each pixel, so no gradient flows through it.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = as_tensor(y_hat)
    a, b = params.coefficients(y)
    d = ops.abs(ops.sub(y_hat, y))
    inner = ops.mul(d, a)
    right = ops.sub(inner, b)
    base = ops.scalar_mul(d, 1.0 / params.epsilon)
    left = ops.scalar_mul(ops.log(ops.add(ops.power(base, params.alpha - y), 1.0)), params.omega)
    near = (d.data < params.theta).astype(np.float64)
    return ops.add(ops.mul(left, near), ops.mul(right, 1.0 - near))


def heatmap_loss(hs: HeatmapSet, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over heatmaps and pixels of the (optionally positive-weighted) elementwise loss."""
    if cfg.variant.endswith("awing"):
        per_px = awing(hs.gt, hs.pred, cfg.awing)
    else:
        diff = ops.sub(hs.pred, hs.gt)
        per_px = ops.mul(diff, diff)
    if cfg.weighted:
        per_px = ops.mul(per_px, cfg.gamma * hs.pos_mask + 1.0)
    return ops.mean(per_px)


def awing_scalar(y: float, y_hat: float, params: AWingParams = AWingParams()) -> float:
    """Plain-float AWing, used for documentation and spot checks."""
    d = abs(y - y_hat)
    if d < params.theta:
        return params.omega * math.log1p((d / params.epsilon) ** (params.alpha - y))
    a, b = params.coefficients(y)
    return float(a) * d - float(b)
