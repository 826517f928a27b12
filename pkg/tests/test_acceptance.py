"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting. Criteria 5 and 6 train the desk-scale model seven times; set
TRYON_SKIP_SLOW=1 to skip them.
"""
import math
import os
import time

import numpy as np
import pytest
from shapely.geometry import Polygon

from tryon.autodiff import Tensor, grad_check, no_grad, ops
from tryon.autodiff.cases import PRIMITIVE_KINDS, primitive_case
from tryon.autodiff.gradcheck import relative_error
from tryon.geometry import composite, quad_is_degenerate, soft_argmax, solve_homography
from tryon.heatmap import AWingParams, HeatmapSet, LossConfig, awing, dilate3x3, heatmap_loss, positive_mask
from tryon.heatmap import render_gaussian, render_quad_heatmaps
from tryon.metrics import disp, is_convex, lssim, mask_iou, quad_iou_oracle, quad_polygon, rasterize_quad
from tryon.model import ModelConfig, build_model, load_checkpoint, save_checkpoint, total_loss
from tryon.synthdata import GenConfig, generate_dataset, write_dataset
from tryon.trainer import TrainConfig, evaluate, evaluate_quads, mean_quad_baseline, mean_result, train

SEEDS = range(20)
slow = pytest.mark.skipif(os.environ.get("TRYON_SKIP_SLOW") == "1", reason="TRYON_SKIP_SLOW=1")


# -- 1. gradient suite ---------------------------------------------------------------------

def _loss_case(rng, variant):
    gt = np.stack([render_gaussian(rng.uniform(0, 8, 2), (8, 8), 3) for _ in range(4)])
    pred = gt + rng.normal(scale=0.5, size=gt.shape)
    d = pred - gt
    # keep every |d| well clear of the kinks at 0 and at the AWing branch switch
    near_kink = (np.abs(np.abs(d) - 0.5) < 1e-3) | (np.abs(d) < 1e-3)
    pred = np.where(near_kink, pred + np.where(d < 0, -1.0, 1.0) * 4e-3, pred)
    mask = positive_mask(dilate3x3(gt))
    cfg = LossConfig(variant=variant)

    def f(t):
        return heatmap_loss(HeatmapSet(gt, t, mask), cfg)

    return f, Tensor(pred, requires_grad=True)


def _end_to_end_error(seed):
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(input_size=32, encoder_channels=(8, 8, 8), seed=seed))
    bg, fg = rng.uniform(size=(2, 1, 3, 32, 32))
    mask = (rng.uniform(size=(1, 1, 32, 32)) > 0.5) * 1.0
    hm = render_quad_heatmaps(rng.uniform(6, 26, (4, 2)), (32, 32), 3)[None]
    sem = rng.integers(0, 12, (1, 32, 32))

    def loss():
        return total_loss(model(bg, fg, mask), hm, sem, LossConfig()).total

    model.zero_grad()
    loss().backward()
    named = [p for _, p in model.named_parameters()]
    worst = 0.0
    with no_grad():
        for i in rng.integers(len(named), size=8):
            p = named[i]
            j = int(rng.integers(p.size))
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + 1e-5
            up = loss().item()
            flat[j] = orig - 1e-5
            down = loss().item()
            flat[j] = orig
            worst = max(worst, float(relative_error(p.grad.reshape(-1)[j], (up - down) / 2e-5)))
    return worst


def test_criterion_1_gradient_suite(verdicts):
    start = time.perf_counter()
    prim = max(
        grad_check(*primitive_case(kind, np.random.default_rng(s)), step=1e-5, tol=1e-4).max_rel_error
        for kind in PRIMITIVE_KINDS
        for s in SEEDS
    )
    losses = max(
        grad_check(*_loss_case(np.random.default_rng(s), v), step=1e-5, tol=1e-4).max_rel_error
        for v in ("weighted-awing", "awing", "weighted-mse", "mse")
        for s in SEEDS
    )
    sa = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        w = rng.normal(size=(2, 2))
        x = Tensor(rng.normal(scale=0.002, size=(2, 6, 7)), requires_grad=True)
        sa = max(sa, grad_check(lambda t: ops.sum(ops.mul(soft_argmax(t, 1000.0), w)), x, tol=1e-4).max_rel_error)
    e2e = max(_end_to_end_error(s) for s in SEEDS)
    elapsed = time.perf_counter() - start
    ok = prim < 1e-4 and losses < 1e-4 and sa < 1e-4 and e2e < 1e-3 and elapsed < 120
    verdicts.record(
        1, ok,
        f"{len(PRIMITIVE_KINDS)} primitives {prim:.1e}, losses {losses:.1e}, soft-argmax {sa:.1e}, "
        f"end-to-end {e2e:.1e} over {len(SEEDS)} seeds in {elapsed:.0f}s",
    )
    assert ok


# -- 2. AWing continuity ---------------------------------------------------------------------

def _branches(y, p):
    """Inner/outer AWing values and slopes at |d| = theta, written out from the formula."""
    e = p.alpha - y
    r = p.theta / p.epsilon
    a = p.omega * e * r ** (e - 1) / (p.epsilon * (1 + r**e))
    b = p.theta * a - p.omega * math.log(1 + r**e)
    inner = p.omega * math.log(1 + r**e)
    outer = a * p.theta - b
    inner_slope = p.omega * e * r ** (e - 1) / p.epsilon / (1 + r**e)
    return inner, outer, inner_slope, a


def _package_slope(y, y_hat):
    t = Tensor(np.array([y_hat]), requires_grad=True)
    ops.sum(awing(np.array([y]), t)).backward()
    return float(t.grad[0])


def test_criterion_2_awing_continuity(verdicts):
    p = AWingParams()
    assert (p.omega, p.alpha, p.epsilon, p.theta) == (14.0, 2.1, 1.0, 0.5)
    value_gap = slope_gap = 0.0
    for y in np.round(np.arange(101) * 0.01, 2):
        inner, outer, s_in, s_out = _branches(y, p)
        value_gap = max(value_gap, abs(inner - outer))
        slope_gap = max(slope_gap, abs(s_in - s_out))
        # the implementation on both sides of the switch
        k = y + p.theta
        lhs, rhs = awing(np.array([y]), np.array([k - 1e-12])).item(), awing(np.array([y]), np.array([k + 1e-12])).item()
        value_gap = max(value_gap, abs(lhs - rhs))
        slope_gap = max(slope_gap, abs(_package_slope(y, k - 1e-7) - _package_slope(y, k + 1e-7)))
    ok = value_gap < 1e-9 and slope_gap < 1e-3
    verdicts.record(2, ok, f"101 targets, max value gap {value_gap:.1e}, max slope gap {slope_gap:.1e}")
    assert ok


# -- 3. geometry ---------------------------------------------------------------------------

def _random_pair(rng):
    while True:
        src = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]) * rng.uniform(20, 50) + rng.uniform(0, 20, 2)
        src += rng.normal(scale=3.0, size=(4, 2))
        dst = src * rng.uniform(0.7, 1.3) + rng.uniform(-10, 10, 2) + rng.normal(scale=4.0, size=(4, 2))
        if not quad_is_degenerate(src, tol=1e-2) and not quad_is_degenerate(dst, tol=1e-2):
            return src, dst


def test_criterion_3_geometry(verdicts):
    rng = np.random.default_rng(3)
    round_trip = 0.0
    for _ in range(1000):
        src, dst = _random_pair(rng)
        round_trip = max(round_trip, np.abs(solve_homography(src, dst).apply(src) - dst).max())

    closed = 0.0
    for _ in range(50):
        q, _ = _random_pair(rng)
        off = rng.uniform(-20, 20, 2)
        want = np.array([[1.0, 0.0, off[0]], [0.0, 1.0, off[1]], [0.0, 0.0, 1.0]])
        closed = max(closed, np.abs(solve_homography(q, q).m - np.eye(3)).max())
        closed = max(closed, np.abs(solve_homography(q, q + off).m - want).max())

    bit_equal = True
    for _ in range(50):
        bg, fg = rng.uniform(size=(2, 32, 32, 3))
        mask = rng.uniform(size=(32, 32)) * (rng.uniform(size=(32, 32)) > 0.5)
        out = composite(bg, fg, mask)
        bit_equal &= bool(np.array_equal(out[mask == 0], bg[mask == 0]))

    # at beta = 1000 the softmax sits on the nearest pixel, so the bound holds per coordinate;
    # the Euclidean error of an arbitrary subpixel center can reach sqrt(2)/2
    axis_err = euclid = 0.0
    for _ in range(1000):
        c = rng.uniform(8, 56, 2)
        got = soft_argmax(Tensor(render_gaussian(c, (64, 64), 6)), 1000.0).data
        axis_err = max(axis_err, float(np.abs(got - c).max()))
        euclid = max(euclid, float(np.hypot(*(got - c))))
    example = float(np.hypot(*(soft_argmax(Tensor(render_gaussian((7.25, 9.5), (24, 24), 6)), 1000.0).data - (7.25, 9.5))))

    ok = round_trip < 1e-6 and closed < 1e-9 and bit_equal and axis_err < 0.5 and example < 0.5
    verdicts.record(
        3, ok,
        f"1000 pairs round trip {round_trip:.1e}, closed forms {closed:.1e}, zero-mask bit-equal {bit_equal}, "
        f"soft-argmax per-axis error {axis_err:.3f}px over 1000 centers (Euclidean {euclid:.3f}), "
        f"(7.25, 9.5) error {example:.3f}px",
    )
    assert ok


# -- 4. metrics ----------------------------------------------------------------------------

def _convex_pair(rng, side=256.0):
    while True:
        cx, cy = rng.uniform(side * 0.3, side * 0.7, 2)
        w, h = rng.uniform(side * 0.2, side * 0.45, 2)
        a = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2], [cx - w / 2, cy + h / 2], [cx + w / 2, cy + h / 2]])
        a += rng.normal(scale=side * 0.03, size=a.shape)
        b = a + rng.normal(scale=side * 0.06, size=a.shape)
        if is_convex(quad_polygon(a)) and is_convex(quad_polygon(b)):
            return a, b


def _shapely_iou(a, b):
    pa, pb = Polygon(quad_polygon(a)), Polygon(quad_polygon(b))
    return pa.intersection(pb).area / pa.union(pb).area


def _disp_scalar(p, g, side):
    return sum(math.sqrt((p[k][0] - g[k][0]) ** 2 + (p[k][1] - g[k][1]) ** 2) for k in range(4)) / 4 / side


def test_criterion_4_metrics(verdicts):
    rng = np.random.default_rng(4)
    iou_gap = oracle_gap = 0.0
    for _ in range(200):
        a, b = _convex_pair(rng)
        exact = quad_iou_oracle(a, b)
        oracle_gap = max(oracle_gap, abs(exact - _shapely_iou(a, b)))
        iou_gap = max(iou_gap, abs(mask_iou(rasterize_quad(a, (256, 256)), rasterize_quad(b, (256, 256))) - exact))

    disp_gap = 0.0
    for _ in range(200):
        p, g = rng.uniform(-10, 80, (2, 4, 2))
        disp_gap = max(disp_gap, abs(disp(p, g, 64) - _disp_scalar(p.tolist(), g.tolist(), 64)))

    img = rng.uniform(size=(64, 64, 3))
    m = rasterize_quad(_convex_pair(rng, 64.0)[0], (64, 64))
    self_sim = lssim(img, img, m, m)

    ok = iou_gap < 0.02 and oracle_gap < 1e-9 and disp_gap < 1e-12 and abs(self_sim - 1.0) < 1e-12
    verdicts.record(
        4, ok,
        f"200 quad pairs raster vs analytic IoU {iou_gap:.4f} (analytic vs shapely {oracle_gap:.1e}), "
        f"disp vs scalar {disp_gap:.1e}, lssim(x, x) = {self_sim:.12f}",
    )
    assert ok


# -- 5/6. learning benchmark and ablation ----------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    recs = generate_dataset(GenConfig(canvas=64, kind="glasses", n_train=200, n_test=50, seed=0))
    tr = [r for r in recs if r.split == "train"]
    te = [r for r in recs if r.split == "test"]
    runs = {}

    def run(variant, seed):
        if (variant, seed) not in runs:
            model = build_model(ModelConfig(seed=seed, fusion="none" if variant == "no-foreground" else "daf"))
            loss = LossConfig(variant="mse" if variant == "mse" else "weighted-awing")
            start = time.perf_counter()
            res = train(model, tr, te, TrainConfig(epochs=30, seed=seed, loss=loss))
            runs[variant, seed] = (evaluate(res.model, te), time.perf_counter() - start)
        return runs[variant, seed]

    return tr, te, run


@slow
def test_criterion_5_learning_benchmark(benchmark, verdicts):
    tr, te, run = benchmark
    base = mean_result(evaluate_quads(te, [mean_quad_baseline(tr)] * len(te)))
    res, seconds = run("full", 0)
    ok = res.iou >= base.iou + 0.15 and res.disp <= base.disp / 2 and res.disp <= 0.05
    verdicts.record(
        5, ok,
        f"held-out IoU {res.iou:.3f} (mean-quad {base.iou:.3f}, need >= {base.iou + 0.15:.3f}), "
        f"Disp {res.disp:.4f} (mean-quad {base.disp:.4f}, need <= {min(base.disp / 2, 0.05):.4f}), "
        f"LSSIM {res.lssim:.3f}, {seconds / 60:.1f} min",
    )
    assert ok


@slow
def test_criterion_6_ablation_direction(benchmark, verdicts):
    _, _, run = benchmark
    iou = {v: np.mean([run(v, s)[0].iou for s in range(3)]) for v in ("full", "no-foreground", "mse")}
    ok = iou["full"] >= iou["no-foreground"] and iou["full"] >= iou["mse"]
    verdicts.record(
        6, ok,
        f"mean IoU over 3 seeds: DAF {iou['full']:.3f} vs no-foreground {iou['no-foreground']:.3f}, "
        f"weighted AWing {iou['full']:.3f} vs MSE {iou['mse']:.3f}",
    )
    assert ok


# -- 7. determinism and persistence ----------------------------------------------------------

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path, verdicts):
    cfg = GenConfig(canvas=32, n_train=8, n_test=4, seed=7)
    write_dataset(tmp_path / "a", cfg)
    write_dataset(tmp_path / "b", cfg)
    datasets = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    recs = generate_dataset(cfg)
    tr = [r for r in recs if r.split == "train"]
    te = [r for r in recs if r.split == "test"]
    mcfg = ModelConfig(input_size=32, encoder_channels=(8, 16, 32), seed=2)
    tcfg = TrainConfig(epochs=3, decay_start_epoch=1, batch_size=4, seed=2)
    ra = train(build_model(mcfg), tr, te, tcfg, out_dir=tmp_path / "ra")
    rb = train(build_model(mcfg), tr, te, tcfg, out_dir=tmp_path / "rb")
    trajectories = ra.history == rb.history and all(
        np.array_equal(x.data, y.data) for x, y in zip(ra.model.parameters(), rb.model.parameters())
    )
    checkpoints = all(
        (tmp_path / "ra" / f).read_bytes() == (tmp_path / "rb" / f).read_bytes() for f in ("last.ckpt", "best.ckpt")
    )

    arrays, config, meta = load_checkpoint(tmp_path / "ra" / "last.ckpt")
    save_checkpoint(tmp_path / "copy.ckpt", arrays, config, meta)
    again, config2, meta2 = load_checkpoint(tmp_path / "copy.ckpt")
    round_trip = (
        (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "ra" / "last.ckpt").read_bytes()
        and config2 == config
        and meta2 == meta
        and all(np.array_equal(arrays[k], again[k]) for k in arrays)
    )

    ok = datasets and trajectories and checkpoints and round_trip
    verdicts.record(
        7, ok,
        f"datasets bit-identical {datasets}, trajectories {trajectories}, checkpoints {checkpoints}, "
        f"checkpoint round trip {round_trip}",
    )
    assert ok
