import hashlib
import json
import math
import shutil

import numpy as np
import pytest

from tryon.geometry import source_quad, warp_and_composite
from tryon.synthdata import (
    FG_RANGES,
    N_BINS,
    DatasetError,
    GenConfig,
    check_record,
    fit_factor,
    generate_background,
    generate_dataset,
    generate_tuple,
    read_dataset,
    read_png,
    tuple_rng,
    write_dataset,
    write_png,
)

ZERO_JITTER = dict(rotation_deg=0.0, scale_range=(1.0, 1.0), skew=0.0, shift=0.0)


@pytest.mark.parametrize("kind", ["glasses", "hat", "tie"])
def test_background_deterministic_and_in_range(kind):
    cfg = GenConfig(kind=kind)
    a = generate_background(np.random.default_rng(5), cfg)
    b = generate_background(np.random.default_rng(5), cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[1].min() >= 0 and a[1].max() < cfg.num_classes
    assert a[0].min() >= 0 and a[0].max() <= 1


def test_eye_line_anchor_inside_head():
    cfg = GenConfig(kind="glasses")
    for seed in range(50):
        _, _, anchor, _ = generate_background(np.random.default_rng(seed), cfg)
        u, v = anchor.point
        # head ellipse has semi-axes (half_width, half_height) in the anchor frame
        assert (u / anchor.half_width) ** 2 + (v / anchor.half_height) ** 2 < 1


def test_zero_jitter_gives_canonical_placement():
    cfg = GenConfig(kind="glasses", **ZERO_JITTER)
    rec = generate_tuple(tuple_rng(0, 0), cfg)
    s = cfg.canvas
    src = source_quad(rec.fg_mask)
    a, b = 0.20 * s, 0.27 * s
    w = 2 * a * fit_factor("glasses", rec.params["fg_width"])
    h = w * (src[2, 1] - src[0, 1]) / (src[1, 0] - src[0, 0])
    cx, cy = s / 2, s / 2 - 0.05 * b
    expected = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2], [cx - w / 2, cy + h / 2], [cx + w / 2, cy + h / 2]])
    assert np.allclose(rec.gt_quad, expected, atol=1e-9)


@pytest.mark.parametrize("kind,count", [("glasses", 300), ("hat", 120), ("tie", 120)])
def test_tuple_invariants_exhaustive(kind, count):
    cfg = GenConfig(kind=kind, n_train=count - count // 5, n_test=count // 5, seed=3)
    for rec in generate_dataset(cfg):
        assert check_record(rec, cfg.num_classes, cfg.canvas) == [], rec.index
        err = np.abs(rec.gt_homography.apply(source_quad(rec.fg_mask)) - rec.gt_quad).max()
        assert err < 1e-8
        _, _, mw = warp_and_composite(rec.bg_image, rec.fg_image, rec.fg_mask, rec.gt_homography)
        outside = mw == 0
        assert np.array_equal(rec.gt_composite[outside], rec.bg_image[outside])


def test_generation_is_pure_function_of_seed_and_config():
    cfg = GenConfig(n_train=6, n_test=2, seed=11)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.bg_image, rb.bg_image) and np.array_equal(ra.gt_quad, rb.gt_quad)
    c = generate_dataset(GenConfig(n_train=6, n_test=2, seed=12))
    assert not np.array_equal(a[0].bg_image, c[0].bg_image)


def test_train_test_foreground_ranges_disjoint():
    cfg = GenConfig(n_train=160, n_test=40)
    recs = generate_dataset(cfg)
    for key, (lo, hi) in zip(("fg_width", "fg_aspect"), FG_RANGES["glasses"]):
        width = (hi - lo) / N_BINS
        train_bins = {math.floor((r.params[key] - lo) / width) for r in recs if r.split == "train"}
        test_bins = {math.floor((r.params[key] - lo) / width) for r in recs if r.split == "test"}
        assert train_bins.isdisjoint(test_bins)
        # no test value falls between two train values of the same bin, and vice versa
        tr = np.array([r.params[key] for r in recs if r.split == "train"])
        te = np.array([r.params[key] for r in recs if r.split == "test"])
        assert np.abs(tr[:, None] - te[None, :]).min() > 0


@pytest.mark.parametrize("kwargs", [dict(n_train=0, n_test=0), dict(kind="scarf"), dict(canvas=8), dict(scale_range=(1.2, 1.0))])
def test_gen_config_validation(kwargs):
    with pytest.raises(ValueError):
        GenConfig(**kwargs)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 65536, (7, 5, 3))
    grey = rng.integers(0, 65536, (4, 9))
    write_png(tmp_path / "a.png", rgb)
    write_png(tmp_path / "b.png", grey)
    assert np.array_equal(read_png(tmp_path / "a.png"), rgb)
    assert np.array_equal(read_png(tmp_path / "b.png"), grey)
    assert (tmp_path / "a.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    cfg = GenConfig(n_train=4, n_test=2, seed=2)
    root = tmp_path_factory.mktemp("ds") / "data"
    records = generate_dataset(cfg)
    write_dataset(root, cfg, records)
    return cfg, root, records


def test_dataset_round_trip_is_exact(small_dataset):
    cfg, root, records = small_dataset
    meta, loaded = read_dataset(root)
    assert meta["config"] == cfg.to_dict() and len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.index == b.index and a.split == b.split
        for name in ("fg_image", "fg_mask", "bg_image", "semantic_mask", "gt_quad", "gt_composite"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name
        assert np.array_equal(a.gt_homography.m, b.gt_homography.m)
        assert a.params == b.params


def test_dataset_writes_are_deterministic(small_dataset, tmp_path):
    cfg, root, _ = small_dataset
    other = write_dataset(tmp_path / "again", cfg)
    for f in sorted(root.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (other / f.relative_to(root)).read_bytes(), f.name


def _copy(root, dst):
    shutil.copytree(root, dst)
    return dst


def test_truncated_keypoint_file_names_tuple(small_dataset, tmp_path):
    _, root, _ = small_dataset
    bad = _copy(root, tmp_path / "bad")
    p = bad / "00003" / "gt.json"
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(DatasetError, match="00003"):
        read_dataset(bad)


def test_invariant_violation_detected(small_dataset, tmp_path):
    _, root, _ = small_dataset
    bad = _copy(root, tmp_path / "bad")
    p = bad / "00001" / "gt.json"
    gt = json.loads(p.read_text())
    gt["gt_quad"][0][0] += 0.5
    p.write_text(json.dumps(gt, indent=1, sort_keys=True))
    meta = json.loads((bad / "meta.json").read_text())
    meta["checksums"]["00001"]["gt.json"] = hashlib.sha256(p.read_bytes()).hexdigest()
    (bad / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="00001.*homography"):
        read_dataset(bad)


def test_missing_meta_and_non_empty_target(small_dataset, tmp_path):
    cfg, root, _ = small_dataset
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
    with pytest.raises(DatasetError):
        write_dataset(root, cfg)
