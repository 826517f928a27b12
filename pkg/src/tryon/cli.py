"""Command-line entry point: ``tryon {gen,train,infer,eval,selftest}``.

Settings come from an optional INI-style config file with sections
``[gen]``, ``[model]``, ``[loss]`` and ``[train]``; any key can be overridden
on the command line as ``--section.key value``. Exit codes: 0 success,
1 usage or validation error, 2 runtime error.

Heavy imports are deferred until after ``--threads`` is applied, because BLAS
reads its thread limits when numpy is first imported.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SECTIONS = ("gen", "model", "loss", "train")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

OVERRIDE_HELP = """\
config overrides:
  --SECTION.KEY VALUE   override any config key, e.g. --train.epochs 5 or
                        --loss.gamma 4; sections: gen, model, loss, train.
                        Tuple values are comma separated (--model.encoder_channels 8,16,32)."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config ----------------------------------------------------------------------------

def _coerce(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got '{text}'")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in text.replace(" ", "").split(",") if p)
    if default is None:
        return None if text.strip().lower() in ("", "none") else int(text)
    return text


def _section_defaults():
    from .heatmap import LossConfig
    from .model import ModelConfig
    from .synthdata import GenConfig
    from .trainer import TrainConfig

    loss = LossConfig()
    train = {k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "loss"}
    lossd = {k: v for k, v in dataclasses.asdict(loss).items() if k != "awing"}
    lossd.update({f"awing_{k}": v for k, v in dataclasses.asdict(loss.awing).items()})
    model = dataclasses.asdict(ModelConfig())
    model["encoder_channels"] = tuple(model["encoder_channels"])
    return {"gen": dataclasses.asdict(GenConfig()), "model": model, "loss": lossd, "train": train}


def load_settings(config_file, overrides: dict) -> dict:
    """Merge defaults, config file and ``{(section, key): text}`` overrides into typed dicts."""
    defaults = _section_defaults()
    settings = {s: {} for s in SECTIONS}
    raw = {}
    if config_file:
        cp = configparser.ConfigParser()
        try:
            with open(config_file) as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise UsageError(f"cannot read config file {config_file}: {exc}") from None
        for section in cp.sections():
            for key, value in cp.items(section):
                raw[(section, key)] = value
    raw.update(overrides)
    for (section, key), text in raw.items():
        if section not in defaults:
            raise UsageError(f"unknown config section '{section}' (expected one of {', '.join(SECTIONS)})")
        if key not in defaults[section]:
            raise UsageError(f"unknown key '{key}' in section [{section}]")
        try:
            settings[section][key] = _coerce(text, defaults[section][key])
        except ValueError as exc:
            raise UsageError(f"[{section}] {key}: {exc}") from None
    return settings


def build_configs(settings: dict):
    """Typed configs from merged settings; raises UsageError on any invalid value."""
    from .heatmap import AWingParams, LossConfig
    from .model import ModelConfig
    from .synthdata import GenConfig
    from .trainer import TrainConfig

    try:
        gen = GenConfig(**settings["gen"])
        lossd = dict(settings["loss"])
        aw = {k[len("awing_"):]: lossd.pop(k) for k in list(lossd) if k.startswith("awing_")}
        loss = LossConfig(**lossd, awing=AWingParams(**aw))
        model = ModelConfig(**settings["model"])
        train = TrainConfig(**settings["train"], loss=loss)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return gen, model, loss, train


def echo_config(out_dir: Path, sections: dict) -> None:
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v) for k, v in values.items()}
    with open(out_dir / "config.ini", "w") as f:
        cp.write(f)


def _flat(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update({f"{k}_{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


def split_overrides(argv):
    """Separate ``--section.key value`` pairs from ordinary arguments."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            name, eq, value = a[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise UsageError(f"override {a} needs a value")
                value = argv[i + 1]
                i += 1
            section, _, key = name.partition(".")
            overrides[(section, key.replace("-", "_"))] = value
        else:
            rest.append(a)
        i += 1
    return rest, overrides


# -- commands --------------------------------------------------------------------------

def cmd_gen(args, overrides) -> int:
    from .synthdata import write_dataset

    s = load_settings(args.config, overrides)
    if args.seed is not None:
        s["gen"]["seed"] = args.seed
    if args.kind is not None:
        s["gen"]["kind"] = args.kind
    if args.canvas is not None:
        s["gen"]["canvas"] = args.canvas
    if args.count is not None:
        if args.count < 1:
            raise UsageError(f"--count must be positive, got {args.count}")
        if not 0 <= args.test_fraction < 1:
            raise UsageError("--test-fraction must lie in [0, 1)")
        n_test = int(round(args.count * args.test_fraction))
        s["gen"]["n_train"], s["gen"]["n_test"] = args.count - n_test, n_test
    gen, *_ = build_configs(s)
    out = write_dataset(args.out, gen)
    print(f"wrote {gen.count} tuples ({gen.n_train} train / {gen.n_test} test) to {out}")
    return EXIT_OK


def _split(records):
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "test"]


def cmd_train(args, overrides) -> int:
    from .model import build_model
    from .synthdata import read_dataset
    from .trainer import resume, train

    out = Path(args.out)
    if args.resume:
        if overrides or args.config:
            raise UsageError("--resume continues with the checkpoint's stored config; drop config options")
        _, records = read_dataset(args.data)
        tr, te = _split(records)
        res = resume(args.resume, tr, te, out_dir=out, log=_log_epoch, stop_after=args.stop_after)
        print(f"best validation IoU {res.best_iou:.4f}")
        return EXIT_OK

    s = load_settings(args.config, overrides)
    if args.epochs is not None:
        s["train"]["epochs"] = args.epochs
        s["train"].setdefault("decay_start_epoch", min(10, args.epochs - 1))
    if args.seed is not None:
        s["train"]["seed"] = args.seed
        s["model"]["seed"] = args.seed
    if args.variant is not None:
        s["loss"]["variant"] = args.variant
    if args.no_semantic:
        s["model"]["use_semantic"] = False
    if args.fusion is not None:
        s["model"]["fusion"] = args.fusion
    meta, records = read_dataset(args.data)
    s["model"].setdefault("input_size", meta["config"]["canvas"])
    s["model"].setdefault("num_semantic_classes", meta["num_classes"])
    _, model_cfg, loss, train_cfg = build_configs(s)
    tr, te = _split(records)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, {"model": model_cfg.to_dict(), "loss": _flat(loss),
                      "train": {k: v for k, v in train_cfg.to_dict().items() if k != "loss"}})
    res = train(build_model(model_cfg), tr, te, train_cfg, out_dir=out, log=_log_epoch, stop_after=args.stop_after)
    print(f"best validation IoU {res.best_iou:.4f}")
    return EXIT_OK


def _log_epoch(rec: dict) -> None:
    val = "" if rec["val_iou"] is None else f" val IoU {rec['val_iou']:.4f} Disp {rec['val_disp']:.4f}"
    print(f"epoch {rec['epoch']:3d} lr {rec['lr']:.3g} L_hm {rec['loss_hm']:.4f} L_sm {rec['loss_sm']:.4f}{val}", flush=True)


def _read_image(path, channels: int):
    import numpy as np
    import png

    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        a = np.array([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, info["planes"])
    except (OSError, png.Error) as exc:
        raise RuntimeError(f"cannot read image {path}: {exc}") from None
    a /= 2 ** info["bitdepth"] - 1
    if info.get("alpha"):
        a = a[..., :-1]
    if channels == 1:
        return a.mean(axis=2)
    return np.repeat(a, 3, axis=2) if a.shape[2] == 1 else a


def cmd_infer(args, overrides) -> int:
    import numpy as np

    from .autodiff import no_grad
    from .geometry import GeometryError, soft_argmax, solve_homography, source_quad, warp_and_composite
    from .model import load_model
    from .synthdata import QUANT, write_png

    if overrides:
        raise UsageError("infer takes no config overrides")
    model, _, _ = load_model(args.checkpoint)
    fg, bg = _read_image(args.fg, 3), _read_image(args.bg, 3)
    mask = _read_image(args.fg_mask, 1)
    side = model.cfg.input_size
    for name, img in (("fg", fg), ("fg-mask", mask), ("bg", bg)):
        if img.shape[:2] != (side, side):
            raise RuntimeError(f"--{name} is {img.shape[1]}x{img.shape[0]}, the model expects {side}x{side}")
    chw = lambda x: np.transpose(x, (2, 0, 1))[None]  # noqa: E731
    with no_grad():
        out = model(chw(bg), chw(fg), mask[None, None])
        heat = out.heatmaps.data[0]
        quad = soft_argmax(out.heatmaps).data[0]
    degenerate = False
    try:
        t = solve_homography(source_quad(mask), quad)
        comp, _, _ = warp_and_composite(bg, fg, mask, t)
        t_list = t.tolist()
    except GeometryError:
        degenerate, comp, t_list = True, bg.copy(), None
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    write_png(dest / "composite.png", np.round(np.clip(comp, 0, 1) * QUANT).astype(np.int64))
    result = {"points": {n: quad[k].tolist() for k, n in enumerate("ABCD")}, "T": t_list, "degenerate": degenerate}
    (dest / "keypoints.json").write_text(json.dumps(result, indent=1))
    if args.dump_heatmaps:
        import png

        for k, n in enumerate("ABCD"):
            h = heat[k]
            span = h.max() - h.min()
            g = np.zeros_like(h) if span == 0 else (h - h.min()) / span
            with open(dest / f"heatmap_{n}.png", "wb") as f:
                png.Writer(side, side, greyscale=True, bitdepth=8).write(f, np.round(g * 255).astype(np.uint8).tolist())
    if args.dump_raw:
        (dest / "heatmaps.json").write_text(json.dumps({n: heat[k].tolist() for k, n in enumerate("ABCD")}))
    print(json.dumps(result))
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    from .synthdata import read_dataset
    from .trainer import evaluate_quads, mean_quad_baseline, mean_result, predict_quads

    if overrides:
        raise UsageError("eval takes no config overrides")
    if args.baseline is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint or --baseline")
    _, records = read_dataset(args.data)
    tr, te = _split(records)
    rows_in = te if args.split == "test" else tr if args.split == "train" else records
    if not rows_in:
        raise RuntimeError(f"dataset has no '{args.split}' tuples")
    if args.baseline == "mean-quad":
        if not tr:
            raise RuntimeError("mean-quad baseline needs training tuples")
        q = mean_quad_baseline(tr)
        preds = [q] * len(rows_in)
    elif args.baseline == "ground-truth":
        preds = [r.gt_quad for r in rows_in]
    else:
        from .model import load_model

        model, _, _ = load_model(args.checkpoint)
        preds = predict_quads(model, rows_in)
    rows = evaluate_quads(rows_in, preds)
    mean = mean_result(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tuple", "lssim", "iou", "disp", "degenerate"])
        for r in rows:
            w.writerow([f"{r.index:05d}", repr(r.lssim), repr(r.iou), repr(r.disp), int(r.degenerate)])
        w.writerow(["mean", repr(mean.lssim), repr(mean.iou), repr(mean.disp), sum(r.degenerate for r in rows)])
    print(f"LSSIM {mean.lssim:.4f}  IoU {mean.iou:.4f}  Disp {mean.disp:.4f}  ({len(rows)} tuples)")
    return EXIT_OK


def cmd_selftest(args, overrides) -> int:
    from .selftest import run_selftest

    if overrides:
        raise UsageError("selftest takes no config overrides")
    ok = run_selftest(seeds=args.seeds, echo=print)
    return EXIT_OK if ok else EXIT_RUNTIME


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    Fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="tryon", description="Keypoint hallucination for virtual accessory try-on.", formatter_class=Fmt)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads (default: library default)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset", epilog=OVERRIDE_HELP, formatter_class=Fmt)
    g.add_argument("--out", required=True, help="output dataset directory; must not exist or be empty (required)")
    g.add_argument("--config", default=None, help="INI config file (default: none, built-in defaults)")
    g.add_argument("--seed", type=int, default=None, help="generation seed (default: [gen] seed, 0)")
    g.add_argument("--count", type=int, default=None, help="total tuples (default: [gen] n_train + n_test, 250)")
    g.add_argument("--test-fraction", type=float, default=0.2, help="share of --count held out as test tuples (default: 0.2)")
    g.add_argument("--kind", choices=("glasses", "hat", "tie"), default=None, help="accessory kind (default: glasses)")
    g.add_argument("--canvas", type=int, default=None, help="image side in pixels (default: 64)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset", epilog=OVERRIDE_HELP, formatter_class=Fmt)
    t.add_argument("--data", required=True, help="dataset directory (required)")
    t.add_argument("--out", required=True, help="output directory for report.ndjson, checkpoints and config.ini (required)")
    t.add_argument("--config", default=None, help="INI config file (default: none, built-in defaults)")
    t.add_argument("--epochs", type=int, default=None, help="training epochs (default: [train] epochs, 30)")
    t.add_argument("--seed", type=int, default=None, help="seed for initialization and shuffling (default: 0)")
    t.add_argument("--variant", choices=("weighted-awing", "awing", "weighted-mse", "mse"), default=None,
                   help="heatmap loss (default: weighted-awing)")
    t.add_argument("--no-semantic", action="store_true", help="drop the semantic decoder (default: off)")
    t.add_argument("--fusion", choices=("daf", "daf-simplified", "add", "none"), default=None,
                   help="bottleneck fusion; 'none' removes the foreground encoder (default: daf)")
    t.add_argument("--resume", default=None, help="continue from a trainer checkpoint such as last.ckpt (default: none)")
    t.add_argument("--stop-after", type=int, default=None,
                   help="stop after this epoch, leaving last.ckpt for --resume (default: run all epochs)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="place an accessory on one background", formatter_class=Fmt)
    i.add_argument("--checkpoint", required=True, help="model checkpoint (required)")
    i.add_argument("--fg", required=True, help="foreground RGB PNG (required)")
    i.add_argument("--fg-mask", required=True, help="foreground mask PNG (required)")
    i.add_argument("--bg", required=True, help="background RGB PNG (required)")
    i.add_argument("--out", required=True, help="output directory (required)")
    i.add_argument("--dump-heatmaps", action="store_true", help="write heatmap_A..D.png, each normalized to [0, 255] (default: off)")
    i.add_argument("--dump-raw", action="store_true", help="write raw heatmap values to heatmaps.json (default: off)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions on a dataset split", formatter_class=Fmt)
    e.add_argument("--data", required=True, help="dataset directory (required)")
    e.add_argument("--checkpoint", default=None, help="model checkpoint; not needed with --baseline (default: none)")
    e.add_argument("--baseline", choices=("mean-quad", "ground-truth"), default=None,
                   help="score a static predictor instead of a model (default: none)")
    e.add_argument("--split", choices=("test", "train", "all"), default="test", help="tuples to evaluate (default: test)")
    e.add_argument("--out", default="eval.csv", help="CSV with one row per tuple plus a mean row (default: eval.csv)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in numerical checks", formatter_class=Fmt)
    s.add_argument("--seeds", type=int, default=3, help="random seeds per gradient check (default: 3)")
    s.set_defaults(func=cmd_selftest)
    return p


def _apply_threads(argv) -> None:
    for k, a in enumerate(argv):
        value = a.split("=", 1)[1] if a.startswith("--threads=") else argv[k + 1] if a == "--threads" and k + 1 < len(argv) else None
        if value is not None and value.isdigit() and int(value) > 0:
            for var in THREAD_VARS:
                os.environ[var] = value


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    try:
        rest, overrides = split_overrides(argv)
        parser = build_parser()
        args = parser.parse_args(rest)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # every other failure is a runtime error with a one-line message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
