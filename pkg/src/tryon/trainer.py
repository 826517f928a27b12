"""Training loop: Adam with coupled L2 decay, a one-knee linear LR schedule,
seeded shuffling and bit-exact resumption from checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.tensor import NumericOverflowError
from .geometry import GeometryError, soft_argmax, solve_homography, source_quad, warp_and_composite
from .heatmap import AWingParams, LossConfig, render_quad_heatmaps
from .metrics import EvalResult, disp, lssim, mask_iou
from .model import TryOnModel, load_model, save_model, total_loss
from .synthdata import quantize

WEIGHT_DECAY_MODE = "l2-in-gradient"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 2e-4
    lr_final: float = 5e-5
    decay_start_epoch: int = 10
    epochs: int = 30
    weight_decay: float = 1e-5
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1
    # label-preserving augmentation of training batches
    hflip: bool = True
    max_shift: int = 4

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError(f"decay_start_epoch must lie in [0, {self.epochs})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if self.max_shift < 0:
            raise ValueError("max_shift must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            loss = dict(d["loss"])
            if isinstance(loss.get("awing"), dict):
                loss["awing"] = AWingParams(**loss["awing"])
            d["loss"] = LossConfig(**loss)
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``decay_start_epoch``, then linear down to ``lr_final`` at the last epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.decay_start_epoch:
        return cfg.lr_init
    t = (epoch - cfg.decay_start_epoch) / (cfg.epochs - cfg.decay_start_epoch)
    return cfg.lr_init + t * (cfg.lr_final - cfg.lr_init)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, named_params) -> "OptimizerState":
        named = list(named_params)
        return cls({n: np.zeros_like(p.data) for n, p in named}, {n: np.zeros_like(p.data) for n, p in named}, 0)


def adam_step(named_params, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """In-place bias-corrected Adam update; missing gradients count as zero."""
    named = list(named_params)
    for name, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in named:
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise TrainingError(f"optimizer state for '{name}' has shape {m.shape}, parameter {p.shape}")
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -- data ------------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    bg: np.ndarray  # (B, 3, S, S)
    fg: np.ndarray
    fg_mask: np.ndarray  # (B, 1, S, S)
    sem: np.ndarray  # (B, S, S)
    quads: np.ndarray  # (B, 4, 2)


def _chw(img: np.ndarray) -> np.ndarray:
    return np.transpose(img, (2, 0, 1))


def make_batch(records) -> Batch:
    return Batch(
        ids=np.array([r.index for r in records]),
        bg=np.stack([_chw(r.bg_image) for r in records]),
        fg=np.stack([_chw(r.fg_image) for r in records]),
        fg_mask=np.stack([r.fg_mask[None] for r in records]),
        sem=np.stack([r.semantic_mask for r in records]),
        quads=np.stack([r.gt_quad for r in records]),
    )


# corner order A B C D is TL TR BL BR; a mirror swaps left and right
_MIRRORED = [1, 0, 3, 2]


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate the last two axes by whole pixels, repeating the edge into the gap."""
    if dy == 0 and dx == 0:
        return a
    h, w = a.shape[-2:]
    k = max(abs(dy), abs(dx))
    pad = [(0, 0)] * (a.ndim - 2) + [(k, k), (k, k)]
    p = np.pad(a, pad, mode="edge")
    return p[..., k - dy:k - dy + h, k - dx:k - dx + w]


def augment_batch(b: Batch, rng: np.random.Generator, cfg: TrainConfig) -> Batch:
    """Random mirror of whole tuples and integer shifts of the background side.

    Both maps send a valid tuple to another valid tuple: the generator is
    left-right symmetric, and the target quad moves with the background.
    The foreground stays in its own frame.
    """
    bg, fg, fm, sem, quads = b.bg.copy(), b.fg.copy(), b.fg_mask.copy(), b.sem.copy(), b.quads.copy()
    side = bg.shape[-1]
    for i in range(len(b.ids)):
        if cfg.hflip and rng.random() < 0.5:
            bg[i], fg[i], fm[i], sem[i] = bg[i, ..., ::-1], fg[i, ..., ::-1], fm[i, ..., ::-1], sem[i, :, ::-1]
            q = quads[i, _MIRRORED]
            q[:, 0] = side - 1 - q[:, 0]
            quads[i] = q
        if cfg.max_shift:
            dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, 2)
            bg[i], sem[i] = _shift(bg[i], dy, dx), _shift(sem[i], dy, dx)
            quads[i] += (dx, dy)
    return Batch(b.ids, bg, fg, fm, sem, quads)


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def gt_heatmaps(quads: np.ndarray, size: int, g: int) -> np.ndarray:
    return np.stack([render_quad_heatmaps(q, (size, size), g) for q in quads])


# -- inference and evaluation ----------------------------------------------------------

def predict_quads(model: TryOnModel, records, chunk: int = 32) -> np.ndarray:
    """Soft-argmax keypoints (N, 4, 2) for every record."""
    out = []
    with no_grad():
        for i in range(0, len(records), chunk):
            b = make_batch(records[i:i + chunk])
            o = model(b.bg, b.fg, b.fg_mask)
            out.append(soft_argmax(o.heatmaps).data)
    return np.concatenate(out) if out else np.zeros((0, 4, 2))


@dataclass
class TupleEval:
    index: int
    lssim: float
    iou: float
    disp: float
    degenerate: bool


def evaluate_quads(records, pred_quads) -> list[TupleEval]:
    """Warp each foreground with the homography implied by its predicted quad and score it.

    A degenerate prediction leaves the background untouched (empty warped mask).
    Composites are quantized like the stored ground truth.
    """
    rows = []
    for rec, q in zip(records, pred_quads):
        side = rec.bg_image.shape[0]
        _, _, gt_mw = warp_and_composite(rec.bg_image, rec.fg_image, rec.fg_mask, rec.gt_homography)
        degenerate = False
        try:
            t = solve_homography(source_quad(rec.fg_mask), q)
            comp, _, mw = warp_and_composite(rec.bg_image, rec.fg_image, rec.fg_mask, t)
            comp = quantize(comp)
        except GeometryError:
            degenerate = True
            comp, mw = rec.bg_image.copy(), np.zeros(rec.bg_image.shape[:2])
        rows.append(TupleEval(
            rec.index,
            lssim(comp, rec.gt_composite, gt_mw, mw),
            mask_iou(mw, gt_mw),
            disp(q, rec.gt_quad, side),
            degenerate,
        ))
    return rows


def mean_result(rows) -> EvalResult:
    return EvalResult(
        float(np.mean([r.lssim for r in rows])),
        float(np.mean([r.iou for r in rows])),
        float(np.mean([r.disp for r in rows])),
    )


def evaluate(model: TryOnModel, records) -> EvalResult:
    return mean_result(evaluate_quads(records, predict_quads(model, records)))


def mean_quad_baseline(train_records) -> np.ndarray:
    return np.mean(np.stack([r.gt_quad for r in train_records]), axis=0)


# -- loop ------------------------------------------------------------------------------

def _opt_arrays(state: OptimizerState) -> dict:
    out = {}
    for n in state.m:
        out[f"adam/m/{n}"] = state.m[n]
        out[f"adam/v/{n}"] = state.v[n]
    return out


def save_training_state(path, model, state: OptimizerState, cfg: TrainConfig, epoch: int, best_iou: float) -> None:
    meta = {"epoch": epoch, "step": state.step, "best_iou": best_iou, "train_config": cfg.to_dict(),
            "weight_decay_mode": WEIGHT_DECAY_MODE}
    save_model(path, model, meta=meta, extra=_opt_arrays(state))


def load_training_state(path):
    """Returns ``(model, state, meta)`` from a checkpoint written by the trainer."""
    model, arrays, meta = load_model(path)
    names = [n for n, _ in model.named_parameters()]
    try:
        state = OptimizerState({n: arrays[f"adam/m/{n}"].copy() for n in names},
                               {n: arrays[f"adam/v/{n}"].copy() for n in names}, int(meta["step"]))
    except KeyError as exc:
        raise TrainingError(f"{path}: checkpoint has no optimizer state ({exc})") from None
    return model, state, meta


@dataclass
class TrainResult:
    history: list
    best_iou: float
    model: TryOnModel


def train(
    model: TryOnModel,
    train_records,
    val_records,
    cfg: TrainConfig,
    out_dir=None,
    state: Optional[OptimizerState] = None,
    start_epoch: int = 1,
    best_iou: float = -1.0,
    stop_after: Optional[int] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run epochs ``start_epoch..cfg.epochs`` (or up to ``stop_after``).

    With ``out_dir`` set, appends one JSON line per epoch to ``report.ndjson``
    and keeps ``last.ckpt`` and ``best.ckpt`` (by validation IoU).
    """
    if not train_records:
        raise TrainingError("training set is empty")
    side = model.cfg.input_size
    for r in train_records[:1] + list(val_records[:1]):
        if r.bg_image.shape[:2] != (side, side):
            raise TrainingError(f"tuple {r.index} is {r.bg_image.shape[0]}px, model expects {side}px")
    named = list(model.named_parameters())
    state = state or OptimizerState.zeros(named)
    g = cfg.loss.radius_for(side)
    out = Path(out_dir) if out_dir is not None else None
    report = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report = open(out / "report.ndjson", "a" if start_epoch > 1 else "w")
        if start_epoch == 1:
            report.write(json.dumps({"config": cfg.to_dict(), "model": model.cfg.to_dict(),
                                     "weight_decay_mode": WEIGHT_DECAY_MODE}) + "\n")
    history = []
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    try:
        for epoch in range(start_epoch, last + 1):
            lr = lr_at(epoch, cfg)
            order = shuffle_order(len(train_records), cfg.seed, epoch)
            aug_rng = np.random.default_rng([int(cfg.seed), int(epoch), 1])
            hm_sum = sm_sum = 0.0
            n_batches = 0
            for i in range(0, len(order), cfg.batch_size):
                b = augment_batch(make_batch([train_records[j] for j in order[i:i + cfg.batch_size]]), aug_rng, cfg)
                try:
                    o = model(b.bg, b.fg, b.fg_mask)
                    losses = total_loss(o, gt_heatmaps(b.quads, side, g), b.sem if o.semantic is not None else None, cfg.loss)
                    if not math.isfinite(losses.total.item()):
                        raise NumericOverflowError("loss is not finite")
                    model.zero_grad()
                    losses.total.backward()
                    adam_step(named, state, lr, cfg)
                except (NumericOverflowError, FloatingPointError, TrainingError) as exc:
                    raise TrainingError(f"epoch {epoch}: numeric failure on batch ids {b.ids.tolist()}: {exc}") from exc
                hm_sum += losses.hm
                sm_sum += losses.sm
                n_batches += 1
            rec = {"epoch": epoch, "lr": lr, "loss_hm": hm_sum / n_batches, "loss_sm": sm_sum / n_batches}
            if val_records and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                res = evaluate(model, val_records)
                rec.update(val_lssim=res.lssim, val_iou=res.iou, val_disp=res.disp)
                if out is not None and res.iou > best_iou:
                    best_iou = res.iou
                    save_training_state(out / "best.ckpt", model, state, cfg, epoch, best_iou)
                best_iou = max(best_iou, res.iou)
            else:
                rec.update(val_lssim=None, val_iou=None, val_disp=None)
            history.append(rec)
            if report is not None:
                report.write(json.dumps(rec) + "\n")
                report.flush()
                save_training_state(out / "last.ckpt", model, state, cfg, epoch, best_iou)
            if log is not None:
                log(rec)
    finally:
        if report is not None:
            report.close()
    return TrainResult(history, best_iou, model)


def resume(checkpoint, train_records, val_records, out_dir=None, **kwargs) -> TrainResult:
    """Continue a run from a trainer checkpoint with its stored config."""
    model, state, meta = load_training_state(checkpoint)
    cfg = TrainConfig.from_dict(meta["train_config"])
    return train(model, train_records, val_records, cfg, out_dir=out_dir, state=state,
                 start_epoch=int(meta["epoch"]) + 1, best_iou=float(meta["best_iou"]), **kwargs)
