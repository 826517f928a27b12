"""Quick numerical self-checks run by ``tryon selftest``."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import grad_check
from .autodiff.cases import PRIMITIVE_KINDS, primitive_case
from .geometry import Homography, solve_homography
from .heatmap import AWingParams, awing_scalar
from .metrics import disp, lssim, mask_iou


def _primitives(seeds: int) -> tuple[bool, str]:
    worst, where = 0.0, ""
    for kind in PRIMITIVE_KINDS:
        for seed in range(seeds):
            f, x = primitive_case(kind, np.random.default_rng(seed))
            r = grad_check(f, x, step=1e-5, tol=1e-4)
            if r.max_rel_error >= worst:
                worst, where = r.max_rel_error, kind
    return worst < 1e-4, f"{len(PRIMITIVE_KINDS)} kinds x {seeds} seeds, worst rel err {worst:.2e} ({where})"


def _awing_continuity() -> tuple[bool, str]:
    p = AWingParams()
    gap = 0.0
    for y in np.linspace(0.0, 1.0, 101):
        a, b = p.coefficients(y)
        inner = p.omega * np.log1p((p.theta / p.epsilon) ** (p.alpha - y))
        gap = max(gap, abs(inner - (float(a) * p.theta - float(b))))
    return gap < 1e-9, f"max value gap at theta {gap:.2e}"


def _homography(n: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(n):
        src = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]) * 40 + rng.uniform(-4, 4, (4, 2))
        dst = src + rng.uniform(-8, 8, (4, 2))
        worst = max(worst, np.abs(solve_homography(src, dst).apply(src) - dst).max())
    ident = solve_homography(src, src).m
    ok = worst < 1e-6 and np.abs(ident - Homography.identity().m).max() < 1e-9
    return ok, f"{n} random pairs, max round-trip error {worst:.2e}"


def _metrics() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32, 3))
    m = np.zeros((32, 32))
    m[8:20, 6:24] = 1
    q = rng.uniform(0, 32, (4, 2))
    ok = abs(lssim(img, img, m, m) - 1) < 1e-12 and mask_iou(m, m) == 1.0 and disp(q, q, 32) == 0.0
    return ok, "lssim(x, x) = 1, IoU(m, m) = 1, Disp(q, q) = 0"


def _awing_example() -> tuple[bool, str]:
    v = awing_scalar(0.0, 0.5)
    return abs(v - 14 * np.log1p(0.5**2.1)) < 1e-12, f"AWing(y=0, y_hat=0.5) = {v:.6f}"


def run_selftest(seeds: int = 3, echo: Callable[[str], None] = print) -> bool:
    checks = [
        ("primitive gradients", lambda: _primitives(seeds)),
        ("awing continuity", _awing_continuity),
        ("awing value", _awing_example),
        ("homography round trip", _homography),
        ("metric identities", _metrics),
    ]
    ok_all = True
    for name, fn in checks:
        ok, detail = fn()
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
