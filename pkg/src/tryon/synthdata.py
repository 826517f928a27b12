"""Procedural try-on tuples with exact ground truth.

A background is a parametric face (12 part classes) or body (8 part classes)
in a random pose. The accessory's target quad is a function of that pose,
refined by the drawn foreground's size and aspect, so the background carries
most of the placement information and the foreground the rest.

All image fields live on the 16-bit grid (``k / 65535``) so that the PNG
round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import png

from .geometry import Homography, solve_homography, source_quad, warp_and_composite
from .heatmap import LossConfig, render_quad_heatmaps

KINDS = ("glasses", "hat", "tie")
FORMAT_VERSION = 1
FACE_CLASSES = 12
BODY_CLASSES = 8
MAX_ATTEMPTS = 100
N_BINS = 9  # odd, so both end bins go to train and test values are always bracketed
QUANT = 65535

# face part labels
BG, HAIR, HAT, BROW, GLASSES, EYE, NOSE, MOUTH, SKIN, NECK, EAR, CLOTH = range(12)
# body part labels
B_BG, B_HAIR, B_HEAD, B_NECK, B_TORSO, B_ARM, B_LEG, B_SHOE = range(8)

# foreground shape ranges: (width on the fg canvas as a fraction, height / width)
FG_RANGES = {
    "glasses": ((0.55, 0.95), (0.30, 0.50)),
    "hat": ((0.55, 0.95), (0.45, 0.70)),
    "tie": ((0.15, 0.30), (2.50, 3.50)),
}


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


def num_classes(kind: str) -> int:
    return BODY_CLASSES if kind == "tie" else FACE_CLASSES


@dataclass(frozen=True)
class GenConfig:
    canvas: int = 64
    kind: str = "glasses"
    n_train: int = 200
    n_test: int = 50
    rotation_deg: float = 15.0
    scale_range: tuple = (0.85, 1.15)
    skew: float = 0.25
    shift: float = 0.08
    noise: float = 0.015
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got '{self.kind}'")
        if self.canvas < 16:
            raise ValueError(f"canvas must be at least 16 px, got {self.canvas}")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test < 1:
            raise ValueError("dataset needs at least one tuple")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")
        if min(self.rotation_deg, self.skew, self.shift, self.noise) < 0:
            raise ValueError("jitter amplitudes must be non-negative")

    @property
    def count(self) -> int:
        return self.n_train + self.n_test

    @property
    def num_classes(self) -> int:
        return num_classes(self.kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class Anchor:
    """Pose of the attachment frame: origin, rotation, yaw skew and the part sizes that drive placement."""

    center: np.ndarray  # frame origin in pixels (x, y)
    tilt: float  # radians, clockwise in image coordinates
    yaw: float
    half_width: float  # head half width (face) or torso half width (body)
    half_height: float
    point: np.ndarray  # attachment point in frame coordinates (u, v)

    def to_world(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        r = np.array([[c, -s], [s, c]])
        return uv @ r.T + self.center


@dataclass
class TupleRecord:
    index: int
    split: str
    fg_image: np.ndarray
    fg_mask: np.ndarray
    bg_image: np.ndarray
    semantic_mask: np.ndarray
    gt_quad: np.ndarray
    gt_homography: Homography
    gt_composite: np.ndarray
    params: dict = field(default_factory=dict)


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * QUANT) / QUANT


def split_of(index: int, cfg: GenConfig) -> str:
    return "train" if index < cfg.n_train else "test"


def fg_param_bins(kind: str, split: str):
    """Disjoint interleaved sub-ranges: train takes even bins, test odd ones."""
    out = []
    for lo, hi in FG_RANGES[kind]:
        w = (hi - lo) / N_BINS
        start = 0 if split == "train" else 1
        out.append([(lo + k * w, lo + (k + 1) * w) for k in range(start, N_BINS, 2)])
    return out


def _draw_binned(rng, bins) -> float:
    lo, hi = bins[rng.integers(len(bins))]
    return float(rng.uniform(lo, hi))


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _local(xs, ys, center, tilt):
    c, s = math.cos(tilt), math.sin(tilt)
    dx, dy = xs - center[0], ys - center[1]
    return c * dx + s * dy, -s * dx + c * dy


def _ellipse(u, v, cu, cv, au, av):
    return ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2 <= 1.0


def _box(u, v, u0, u1, v0, v1):
    return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def _paint(img, sem, region, color, label, rng, shade=0.04):
    c = np.clip(np.asarray(color) + rng.uniform(-shade, shade, 3), 0, 1)
    img[region] = c
    sem[region] = label


def _backdrop(rng, size):
    xs, ys = _grid(size)
    c0, c1 = rng.uniform(0.15, 0.9, 3), rng.uniform(0.15, 0.9, 3)
    ang = rng.uniform(0, 2 * math.pi)
    t = (math.cos(ang) * xs + math.sin(ang) * ys) / size
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return c0 + (c1 - c0) * t[..., None]


SKIN_TONES = np.array([[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.68, 0.47, 0.34], [0.45, 0.30, 0.20]])
HAIR_TONES = np.array([[0.08, 0.06, 0.05], [0.35, 0.22, 0.12], [0.80, 0.65, 0.35], [0.55, 0.55, 0.55]])


def _pose(rng, cfg: GenConfig, base_center):
    s = cfg.canvas
    center = np.asarray(base_center, dtype=np.float64) + rng.uniform(-cfg.shift, cfg.shift, 2) * s
    lo, hi = cfg.scale_range
    return {
        "cx": float(center[0]),
        "cy": float(center[1]),
        "scale": float(rng.uniform(lo, hi)),
        "tilt": float(math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))),
        "yaw": float(rng.uniform(-cfg.skew, cfg.skew)),
    }


def _face(rng, cfg: GenConfig, pose: dict):
    s = cfg.canvas
    xs, ys = _grid(s)
    img = _backdrop(rng, s)
    sem = np.zeros((s, s), dtype=np.int64)
    center = np.array([pose["cx"], pose["cy"]])
    a, b = 0.20 * s * pose["scale"], 0.27 * s * pose["scale"]
    tilt, yaw = pose["tilt"], pose["yaw"]
    u, v = _local(xs, ys, center, tilt)
    skin = np.clip(SKIN_TONES[rng.integers(4)] + rng.uniform(-0.05, 0.05, 3), 0, 1)
    hair = HAIR_TONES[rng.integers(4)]
    shift = 0.3 * a * yaw  # facial features slide toward the turned side

    _paint(img, sem, (v > 0.85 * b) & (np.abs(u) < 1.6 * a + (v - b) * 0.8), rng.uniform(0.1, 0.9, 3), CLOTH, rng)
    _paint(img, sem, _box(u, v, -0.45 * a, 0.45 * a, 0.3 * b, 1.05 * b), skin * 0.85, NECK, rng, 0.0)
    for side in (-1, 1):
        _paint(img, sem, _ellipse(u, v, side * 0.98 * a - shift * 0.5, 0.0, 0.17 * a, 0.26 * b), skin * 0.92, EAR, rng, 0.0)
    _paint(img, sem, _ellipse(u, v, 0.0, -0.12 * b, 1.08 * a, 1.0 * b), hair, HAIR, rng)
    head = _ellipse(u, v, 0.0, 0.0, a, b)
    _paint(img, sem, head, skin, SKIN, rng, 0.0)
    fringe = rng.uniform(0.35, 0.55)
    _paint(img, sem, head & (v < -fringe * b + 0.08 * b * np.sin(3.0 * u / a)), hair, HAIR, rng, 0.0)
    eye_v = -0.05 * b
    for side in (-1, 1):
        eu = shift + side * 0.42 * a
        size = 1.0 + side * 0.4 * yaw
        _paint(img, sem, _ellipse(u, v, eu, eye_v - 0.28 * b, 0.26 * a * size, 0.05 * b), hair * 0.7, BROW, rng, 0.0)
        _paint(img, sem, _ellipse(u, v, eu, eye_v, 0.2 * a * size, 0.1 * b), [0.97, 0.97, 0.95], EYE, rng, 0.02)
        _paint(img, sem, _ellipse(u, v, eu, eye_v, 0.09 * a * size, 0.08 * b), [0.1, 0.1, 0.15], EYE, rng, 0.05)
    _paint(img, sem, _ellipse(u, v, shift * 1.2, 0.2 * b, 0.12 * a, 0.17 * b), skin * 0.8, NOSE, rng, 0.0)
    _paint(img, sem, _ellipse(u, v, shift, 0.52 * b, 0.32 * a, 0.07 * b), [0.7, 0.2, 0.25], MOUTH, rng)

    if cfg.kind == "glasses":
        point = np.array([shift, eye_v])
    else:  # hat sits on the forehead line
        point = np.array([0.0, -0.62 * b])
    return img, sem, Anchor(center, tilt, yaw, a, b, point)


def _body(rng, cfg: GenConfig, pose: dict):
    s = cfg.canvas
    xs, ys = _grid(s)
    img = _backdrop(rng, s)
    sem = np.zeros((s, s), dtype=np.int64)
    center = np.array([pose["cx"], pose["cy"]])  # center of the torso
    tw, th = 0.2 * s * pose["scale"], 0.26 * s * pose["scale"]
    tilt, yaw = pose["tilt"], pose["yaw"]
    u, v = _local(xs, ys, center, tilt)
    skin = np.clip(SKIN_TONES[rng.integers(4)] + rng.uniform(-0.05, 0.05, 3), 0, 1)
    shirt = rng.uniform(0.1, 0.9, 3)
    shift = 0.25 * tw * yaw

    for side in (-1, 1):
        _paint(img, sem, _box(u, v, side * 0.45 * tw - 0.3 * tw, side * 0.45 * tw + 0.3 * tw, th, 2.2 * th), [0.2, 0.25, 0.45], B_LEG, rng)
        _paint(img, sem, _box(u, v, side * 0.45 * tw - 0.38 * tw, side * 0.45 * tw + 0.38 * tw, 2.2 * th, 2.45 * th), [0.1, 0.08, 0.06], B_SHOE, rng)
        _paint(img, sem, _box(u, v, side * 1.1 * tw - 0.14 * tw, side * 1.1 * tw + 0.14 * tw, -0.9 * th, 0.9 * th), shirt * 0.9, B_ARM, rng, 0.0)
    _paint(img, sem, _box(u, v, -tw, tw, -th, th), shirt, B_TORSO, rng, 0.0)
    _paint(img, sem, _box(u, v, -0.3 * tw, 0.3 * tw, -1.25 * th, -0.95 * th), skin * 0.85, B_NECK, rng, 0.0)
    # V-shaped collar opening shows the neck
    _paint(img, sem, (v >= -th) & (v < -0.75 * th) & (np.abs(u - shift) < 0.25 * tw * (-0.75 * th - v) / (0.25 * th)), skin * 0.85, B_NECK, rng, 0.0)
    _paint(img, sem, _ellipse(u, v, shift, -1.7 * th, 0.55 * tw, 0.55 * th), [0.1, 0.07, 0.05], B_HAIR, rng)
    _paint(img, sem, _ellipse(u, v, shift, -1.62 * th, 0.5 * tw, 0.5 * th), skin, B_HEAD, rng, 0.0)
    return img, sem, Anchor(center, tilt, yaw, tw, th, np.array([shift, -0.75 * th]))


def base_center(kind: str, canvas: int) -> np.ndarray:
    s = canvas
    return {"glasses": np.array([0.5, 0.5]), "hat": np.array([0.5, 0.62]), "tie": np.array([0.5, 0.48])}[kind] * s


def generate_background(rng, cfg: GenConfig):
    """Returns ``(bg_image, semantic_mask, anchor, pose)``."""
    pose = _pose(rng, cfg, base_center(cfg.kind, cfg.canvas))
    draw = _body if cfg.kind == "tie" else _face
    img, sem, anchor = draw(rng, cfg, pose)
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    return quantize(img), sem, anchor, pose


def generate_foreground(rng, kind: str, canvas: int, width: float, aspect: float):
    """Accessory drawing ``(image, binary mask)`` whose mask bbox is about ``width * canvas`` wide."""
    s = canvas
    xs, ys = _grid(s)
    wpx = width * s
    hpx = aspect * wpx
    cx = s / 2 + rng.uniform(-0.03, 0.03) * s
    cy = s / 2 + rng.uniform(-0.03, 0.03) * s
    img = np.ones((s, s, 3)) * rng.uniform(0.0, 1.0, 3)  # unmasked area: arbitrary colour
    frame = rng.uniform(0.0, 0.35, 3)
    fill = rng.uniform(0.3, 1.0, 3)
    u, v = xs - cx, ys - cy
    if kind == "glasses":
        au, av = 0.22 * wpx, hpx / 2
        lenses = _ellipse(u, v, -0.27 * wpx, 0.0, au, av) | _ellipse(u, v, 0.27 * wpx, 0.0, au, av)
        inner = _ellipse(u, v, -0.27 * wpx, 0.0, au - 1.5, av - 1.5) | _ellipse(u, v, 0.27 * wpx, 0.0, au - 1.5, av - 1.5)
        bridge = _box(u, v, -0.06 * wpx, 0.06 * wpx, -0.3 * av, -0.05 * av)
        mask = lenses | bridge
        img[mask] = frame
        img[inner] = fill
    elif kind == "hat":
        brim = _box(u, v, -wpx / 2, wpx / 2, hpx / 2 - 0.18 * hpx, hpx / 2)
        crown = _box(u, v, -0.3 * wpx, 0.3 * wpx, -hpx / 2, hpx / 2)
        band = _box(u, v, -0.3 * wpx, 0.3 * wpx, 0.12 * hpx, 0.32 * hpx)
        mask = brim | crown
        img[mask] = fill
        img[band | brim] = frame
    else:
        # knot on top, then a kite-shaped blade
        knot = _box(u, v, -0.3 * wpx, 0.3 * wpx, -hpx / 2, -hpx / 2 + 0.12 * hpx)
        t = (v + hpx / 2 - 0.12 * hpx) / (0.88 * hpx)
        half = np.where(t < 0.85, 0.25 + 0.25 * t / 0.85, 0.5 * (1 - t) / 0.15) * wpx
        blade = (t >= 0) & (t <= 1) & (np.abs(u) <= half)
        mask = knot | blade
        img[mask] = fill
        img[knot] = frame
    img = img + rng.normal(0.0, 0.01, img.shape)
    return quantize(img), mask.astype(np.float64)


def fit_factor(kind: str, width: float) -> float:
    """Size refinement: bigger drawn accessories sit slightly larger on the body."""
    (lo, hi), _ = FG_RANGES[kind]
    t = (width - lo) / (hi - lo)
    return {"glasses": 0.8 + 0.35 * t, "hat": 1.0 + 0.4 * t, "tie": 0.25 + 0.15 * t}[kind]


def place_accessory(anchor: Anchor, kind: str, src_quad: np.ndarray, width: float) -> np.ndarray:
    """Target quad (A, B, C, D) from the anchor pose and the foreground's size and aspect."""
    src = np.asarray(src_quad, dtype=np.float64)
    aspect = (src[2, 1] - src[0, 1]) / max(src[1, 0] - src[0, 0], 1e-9)
    w = 2.0 * anchor.half_width * fit_factor(kind, width)
    h = w * aspect
    k = 0.5 * anchor.yaw  # perspective: the side turned toward the viewer appears taller
    hl, hr = 1.0 - k, 1.0 + k
    pu, pv = anchor.point
    if kind == "glasses":
        top, bottom = -h / 2, h / 2
    elif kind == "hat":
        top, bottom = -h, 0.0
    else:
        top, bottom = 0.0, h
    local = np.array([
        [pu - w / 2, pv + top * hl],
        [pu + w / 2, pv + top * hr],
        [pu - w / 2, pv + bottom * hl],
        [pu + w / 2, pv + bottom * hr],
    ])
    return anchor.to_world(local)


def _draw_tuple(rng, cfg: GenConfig, index: int) -> TupleRecord:
    split = split_of(index, cfg)
    bg, sem, anchor, pose = generate_background(rng, cfg)
    wbins, abins = fg_param_bins(cfg.kind, split)
    width, aspect = _draw_binned(rng, wbins), _draw_binned(rng, abins)
    fg, mask = generate_foreground(rng, cfg.kind, cfg.canvas, width, aspect)
    src = source_quad(mask)
    quad = place_accessory(anchor, cfg.kind, src, width)
    t = solve_homography(src, quad)
    comp, _, _ = warp_and_composite(bg, fg, mask, t)
    params = dict(pose, fg_width=width, fg_aspect=aspect)
    return TupleRecord(index, split, fg, mask, bg, sem, quad, t, quantize(comp), params)


def _acceptable(rec: TupleRecord, cfg: GenConfig) -> bool:
    s = cfg.canvas
    if np.any(rec.gt_quad < -0.1 * s) or np.any(rec.gt_quad > 1.1 * s):
        return False
    # every keypoint heatmap needs positive pixels, otherwise the weighted loss has nothing to up-weight
    g = LossConfig().radius_for(s)
    hm = render_quad_heatmaps(rec.gt_quad, (s, s), g)
    return bool(np.all(hm.reshape(4, -1).max(axis=1) >= 0.2))


def tuple_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_tuple(rng, cfg: GenConfig, index: int = 0) -> TupleRecord:
    for _ in range(MAX_ATTEMPTS):
        rec = _draw_tuple(rng, cfg, index)
        if _acceptable(rec, cfg):
            return rec
    raise GenerationError(f"tuple {index}: no acceptable draw in {MAX_ATTEMPTS} attempts")


def generate_dataset(cfg: GenConfig) -> list[TupleRecord]:
    return [generate_tuple(tuple_rng(cfg.seed, i), cfg, i) for i in range(cfg.count)]


def check_record(rec: TupleRecord, n_classes: int, canvas: int) -> list[str]:
    """Every TupleRecord invariant; returns human-readable violations (empty when valid)."""
    problems = []
    for name in ("fg_image", "fg_mask", "bg_image", "gt_composite"):
        a = getattr(rec, name)
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
            problems.append(f"{name} outside [0, 1]")
    if rec.semantic_mask.min() < 0 or rec.semantic_mask.max() >= n_classes:
        problems.append(f"semantic index outside [0, {n_classes - 1}]")
    if np.any(rec.gt_quad < -0.1 * canvas) or np.any(rec.gt_quad > 1.1 * canvas):
        problems.append("target quad outside [-0.1, 1.1] x canvas")
    try:
        err = np.abs(rec.gt_homography.apply(source_quad(rec.fg_mask)) - rec.gt_quad).max()
        if not err <= 1e-8:
            problems.append(f"homography maps source quad to target with error {err:.3g}")
        comp, _, _ = warp_and_composite(rec.bg_image, rec.fg_image, rec.fg_mask, rec.gt_homography)
        if not np.array_equal(quantize(comp), rec.gt_composite):
            problems.append("ground-truth composite differs from re-rendered composite")
    except Exception as exc:  # degenerate mask or homography
        problems.append(f"geometry check failed: {exc}")
    return problems


# -- dataset IO --------------------------------------------------------------------------

def write_png(path, arr: np.ndarray) -> None:
    """16-bit grayscale (H, W) or RGB (H, W, 3) PNG of integer levels."""
    a = np.asarray(arr)
    h, w = a.shape[:2]
    greyscale = a.ndim == 2
    rows = a.reshape(h, -1).astype(np.uint16)
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=greyscale, bitdepth=16).write(f, rows.tolist())


def read_png(path) -> np.ndarray:
    w, h, rows, info = png.Reader(filename=str(path)).read()
    a = np.array([np.asarray(r, dtype=np.uint16) for r in rows])
    planes = info["planes"]
    return a.reshape(h, w) if planes == 1 else a.reshape(h, w, planes)


def _levels(x: np.ndarray) -> np.ndarray:
    return np.round(x * QUANT).astype(np.int64)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


TUPLE_FILES = ("fg.png", "fg_mask.png", "bg.png", "sem.png", "gt.png", "gt.json")


def _write_tuple(d: Path, rec: TupleRecord) -> None:
    d.mkdir()
    write_png(d / "fg.png", _levels(rec.fg_image))
    write_png(d / "fg_mask.png", _levels(rec.fg_mask))
    write_png(d / "bg.png", _levels(rec.bg_image))
    write_png(d / "sem.png", rec.semantic_mask)
    write_png(d / "gt.png", _levels(rec.gt_composite))
    gt = {
        "index": rec.index,
        "split": rec.split,
        "gt_quad": rec.gt_quad.tolist(),
        "T": rec.gt_homography.tolist(),
        "params": rec.params,
    }
    (d / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))


def write_dataset(out_dir, cfg: GenConfig, records: Optional[list] = None) -> Path:
    """Write every tuple then ``meta.json`` (with per-file SHA-256) via an atomic rename.

    The dataset is assembled in a sibling temp directory, so a failure never
    leaves a partial dataset at ``out_dir``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise DatasetError(f"{out}: output directory is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    records = generate_dataset(cfg) if records is None else records
    tmp = Path(tempfile.mkdtemp(prefix=".dataset-", dir=out.parent))
    try:
        checksums = {}
        for rec in records:
            d = tmp / f"{rec.index:05d}"
            _write_tuple(d, rec)
            checksums[d.name] = {f: _sha(d / f) for f in TUPLE_FILES}
        meta = {
            "format_version": FORMAT_VERSION,
            "config": cfg.to_dict(),
            "counts": {"train": cfg.n_train, "test": cfg.n_test},
            "num_classes": cfg.num_classes,
            "checksums": checksums,
        }
        (tmp / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def read_meta(root) -> dict:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no meta.json, not a dataset directory") from None
    except ValueError as exc:
        raise DatasetError(f"{root}/meta.json: malformed ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{root}: unsupported dataset format {meta.get('format_version')}")
    return meta


def _read_tuple(d: Path, expected: dict, tid: str) -> TupleRecord:
    for f in TUPLE_FILES:
        p = d / f
        if not p.exists():
            raise DatasetError(f"tuple {tid}: missing {f}")
        if _sha(p) != expected.get(f):
            raise DatasetError(f"tuple {tid}: checksum mismatch in {f}")
    try:
        gt = json.loads((d / "gt.json").read_text())
        quad = np.array(gt["gt_quad"], dtype=np.float64)
        t = Homography(np.array(gt["T"], dtype=np.float64).reshape(3, 3))
        fg = read_png(d / "fg.png") / QUANT
        mask = read_png(d / "fg_mask.png") / QUANT
        bg = read_png(d / "bg.png") / QUANT
        sem = read_png(d / "sem.png").astype(np.int64)
        comp = read_png(d / "gt.png") / QUANT
    except (ValueError, KeyError, png.Error) as exc:
        raise DatasetError(f"tuple {tid}: malformed file ({exc})") from None
    if quad.shape != (4, 2):
        raise DatasetError(f"tuple {tid}: gt_quad must be 4 points")
    return TupleRecord(int(gt["index"]), gt["split"], fg, mask, bg, sem, quad, t, comp, gt.get("params", {}))


def read_dataset(root, validate: bool = True) -> tuple[dict, list[TupleRecord]]:
    """Load ``(meta, records)``; checksums always verified, invariants when ``validate``."""
    root = Path(root)
    meta = read_meta(root)
    cfg = meta["config"]
    records = []
    for tid in sorted(meta["checksums"]):
        rec = _read_tuple(root / tid, meta["checksums"][tid], tid)
        if validate:
            problems = check_record(rec, meta["num_classes"], cfg["canvas"])
            if problems:
                raise DatasetError(f"tuple {tid}: " + "; ".join(problems))
        records.append(rec)
    return meta, records
