"""Command-line interface: ``monounet <command> [--config FILE] [--key value ...]``.

Every command accepts ``--config`` with ``key = value`` lines using the same
keys as its flags (dashes or underscores); flags given on the command line
override the file.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from . import checkpoint, clinstats, metrics, phantom
from .errors import DataError, MonoUNetError, NumericError, UsageError
from .fileio import (Entry, format_config, read_config, read_manifest, read_mask, read_pgm,
                     write_manifest, write_pgm)
from .monogenic import MonoBlock
from .network import ALIASES, VARIANTS, ModelSpec, count_flops, param_formula
from .training import TrainConfig, predict, prepare, train, zscore

RUN_CONFIG = "config.txt"
RUN_LOG = "runlog.csv"
RUN_CHECKPOINT = "best.ckpt"


def _int(v):
    return int(v)


def _float(v):
    return float(v)


# command -> key -> (converter, default, help); None default means required
OPTIONS: dict[str, dict[str, tuple[Callable, object, str]]] = {
    "phantom-gen": {
        "out": (str, None, "output dataset directory"),
        "count": (_int, 200, "clean images, tagged split=train"),
        "test_count": (_int, 0, "shifted-domain images, tagged split=test"),
        "seed": (_int, 0, "generator seed"),
        "image_size": (_int, 256, "image side in pixels"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        "out": (str, None, "run directory"),
        "split": (str, "train", "manifest split tag to train on"),
        "variant": (str, "full", "model variant"),
        "channels": (_int, 2, "feature channels"),
        "stages": (_int, 7, "encoder stages"),
        "epochs": (_int, 1000, "schedule length"),
        "max_epochs": (_int, 0, "stop after this many epochs (0 = run the full schedule)"),
        "batch_size": (_int, 8, "batch size"),
        "lr0": (_float, 0.01, "initial learning rate"),
        "weight_decay": (_float, 0.01, "decoupled weight decay"),
        "aug_prob": (_float, 0.8, "augmentation probability"),
        "val_fraction": (_float, 0.2, "validation fraction"),
        "seed": (_int, 0, "training seed"),
        "threads": (_int, 1, "torch intra-op threads"),
    },
    "infer": {
        "checkpoint": (str, None, "checkpoint file or run directory"),
        "data": (str, None, "dataset directory"),
        "out": (str, None, "prediction directory"),
        "split": (str, "", "only this manifest split (empty = all)"),
        "seed": (_int, 0, "unused; echoed with the output"),
    },
    "eval": {
        "data": (str, None, "dataset directory with reference masks"),
        "pred": (str, None, "prediction directory"),
        "out": (str, None, "metrics CSV path"),
        "split": (str, "", "only this manifest split (empty = all)"),
        "seed": (_int, 0, "unused; echoed with the output"),
    },
    "clinstats": {
        "data": (str, None, "dataset directory with manual masks and raw images"),
        "pred": (str, None, "prediction directory (automatic masks)"),
        "out": (str, None, "report CSV path; the text block goes next to it as .txt"),
        "split": (str, "", "only this manifest split (empty = all)"),
        "seed": (_int, 0, "unused; echoed with the output"),
    },
    "phase-dump": {
        "image": (str, None, "input PGM image"),
        "out": (str, None, "output directory for per-filter, per-scale phase maps"),
        "checkpoint": (str, "", "take log-Gabor parameters from this checkpoint or run"),
        "seed": (_int, 0, "unused; echoed with the output"),
    },
    "summary": {
        "variant": (str, "", "variant name (empty = all variants)"),
        "channels": (_int, 2, "feature channels"),
        "stages": (_int, 7, "encoder stages"),
        "input_size": (_int, 256, "input side for FLOP counting"),
        "seed": (_int, 0, "unused; echoed with the output"),
    },
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monounet", description="Phase-gated tiny U-Net toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key = value file; flags override it")
        for key, (_, default, help_) in opts.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"{help_} (default: {default})" if default is not None else help_)
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags, converting every value."""
    opts = OPTIONS[command]
    raw: dict[str, object] = {}
    if args.config:
        for key, value in read_config(args.config).items():
            norm = key.replace("-", "_")
            if norm not in opts:
                raise UsageError(f"{args.config}: unknown key '{key}' for {command}")
            raw[norm] = value
    for key in opts:
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    out = {}
    for key, (conv, default, _) in opts.items():
        if key not in raw:
            if default is None:
                raise UsageError(f"missing required option '{key.replace('_', '-')}'")
            out[key] = default
            continue
        try:
            out[key] = conv(raw[key])
        except (TypeError, ValueError):
            raise UsageError(f"bad value for '{key}': {raw[key]!r}") from None
    return out


def _spec(variant: str, channels: int, stages: int, size: int = 256) -> ModelSpec:
    try:
        return ModelSpec(variant, stages, channels, size)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid model options: {exc}") from None


def _entries(data: str, split: str, check_masks: bool = True) -> list[Entry]:
    entries = read_manifest(data, check_masks)
    if split:
        entries = [e for e in entries if e.split == split]
        if not entries:
            raise DataError(f"{data}: no entries with split '{split}'")
    return entries


# -- commands -------------------------------------------------------------------

def cmd_phantom_gen(o: dict) -> None:
    root = Path(o["out"])
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    sets = [("train", "clean", phantom.generate(
        phantom.PhantomConfig(seed=o["seed"], count=o["count"], image_size=o["image_size"])))]
    if o["test_count"] > 0:
        # distinct seed stream so test anatomy never repeats a training sample
        cfg = phantom.PhantomConfig(seed=o["seed"] + 1_000_003, count=o["test_count"],
                                    image_size=o["image_size"])
        sets.append(("test", "shift", phantom.shifted_set(cfg)))
    for split, prefix, items in sets:
        for i, ph in enumerate(items):
            name = f"{prefix}_{i:04d}.pgm"
            write_pgm(root / "images" / name, ph.image)
            write_pgm(root / "masks" / name, ph.mask)
            entries.append(Entry(root / "images" / name, root / "masks" / name,
                                 ph.pixel_spacing, split))
    write_manifest(root, entries)
    print(f"wrote {len(entries)} images to {root}")


def cmd_train(o: dict) -> None:
    torch.set_num_threads(max(1, o["threads"]))
    spec = _spec(o["variant"], o["channels"], o["stages"])
    cfg = TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"], lr0=o["lr0"],
                      weight_decay=o["weight_decay"], aug_prob=o["aug_prob"],
                      val_fraction=o["val_fraction"], seed=o["seed"])
    samples = [prepare(read_pgm(e.image), read_mask(e.mask), e.pixel_spacing, e.image_id,
                       spec.input_size) for e in _entries(o["data"], o["split"])]
    run = Path(o["out"])
    run.mkdir(parents=True, exist_ok=True)
    (run / RUN_CONFIG).write_text(format_config(o))
    t0 = time.time()

    def report(rec):
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.3e}  loss {rec.train_loss:.4f}  "
              f"val_dice {rec.val_dice:.4f}  skipped {rec.skipped_steps}  "
              f"({time.time() - t0:.0f}s)", flush=True)

    model, log = train(samples, cfg, spec, report, o["max_epochs"] or None)
    log.write_csv(run / RUN_LOG)
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise NumericError("trained parameters are not finite")
    if not np.isfinite([r.train_loss for r in log.records]).all():
        raise NumericError("training loss became non-finite")
    checkpoint.save(model, run / RUN_CHECKPOINT)
    print(f"best val_dice {log.best_val_dice:.4f} at epoch {log.best_epoch}; run saved to {run}")


def _load_model(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / RUN_CHECKPOINT
    if not p.is_file():
        raise DataError(f"missing checkpoint {p}")
    try:
        return checkpoint.load(p)
    except (checkpoint.CheckpointError, ValueError, KeyError) as exc:
        raise DataError(f"{p}: {exc}") from None


def cmd_infer(o: dict) -> None:
    model = _load_model(o["checkpoint"])
    size = model.spec.input_size
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    entries = _entries(o["data"], o["split"], check_masks=False)
    for e in entries:
        raw = read_pgm(e.image)
        sample = prepare(raw, None, e.pixel_spacing, e.image_id, size)
        pred = predict(model, [sample.image])[0]
        if pred.shape != raw.shape:
            pred = ndimage.zoom(pred.astype(np.float64),
                                (raw.shape[0] / size, raw.shape[1] / size), order=0,
                                grid_mode=True, mode="nearest") >= 0.5
        if not np.isfinite(sample.image).all():
            raise NumericError(f"non-finite input after normalization: {e.image}")
        write_pgm(out / f"{e.image_id}.pgm", pred)
    print(f"wrote {len(entries)} masks to {out}")


def _pairs(o: dict):
    for e in _entries(o["data"], o["split"]):
        pred_path = Path(o["pred"]) / f"{e.image_id}.pgm"
        if not pred_path.is_file():
            raise DataError(f"missing prediction {pred_path}")
        pred, gt = read_mask(pred_path), read_mask(e.mask)
        if pred.shape != gt.shape:
            raise DataError(f"{pred_path}: shape {pred.shape} differs from reference {gt.shape}")
        yield e, pred, gt


def cmd_eval(o: dict) -> None:
    ids, preds, gts, spacings = [], [], [], []
    for e, pred, gt in _pairs(o):
        ids.append(e.image_id)
        preds.append(pred)
        gts.append(gt)
        spacings.append(e.pixel_spacing)
    summary = metrics.evaluate_dataset(preds, gts, spacings, ids)
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(o["out"], summary)
    print(summary.format())


def cmd_clinstats(o: dict) -> None:
    rows = []
    for e, pred, gt in _pairs(o):
        pred = metrics.largest_component(pred)
        image = read_pgm(e.image)
        try:
            rows.append((e.image_id,
                         clinstats.thickness(gt, e.pixel_spacing),
                         clinstats.thickness(pred, e.pixel_spacing),
                         clinstats.echo_intensity(image, gt),
                         clinstats.echo_intensity(image, pred)))
        except clinstats.UndefinedOutcome:
            print(f"skipping {e.image_id}: empty mask")
    if len(rows) < 3:
        raise DataError(f"need at least 3 images with non-empty masks, got {len(rows)}")
    arr = np.array([r[1:] for r in rows])
    lines = []
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome", "unit", "n", "n_excluded", "icc2k", "icc_ci_low", "icc_ci_high",
                    "bias_pct", "bias_abs", "sd_pct", "loa_low_pct", "loa_high_pct",
                    "prop_bias_slope", "prop_bias_r2", "prop_bias_p"])
        for name, unit, manual, auto in [("thickness", "mm", arr[:, 0], arr[:, 1]),
                                         ("echo_intensity", "a.u.", arr[:, 2], arr[:, 3])]:
            try:
                icc = clinstats.icc2k(np.column_stack([manual, auto]))
                ba = clinstats.bland_altman(manual, auto)
            except ValueError as exc:
                raise NumericError(f"{name}: {exc}") from None
            w.writerow([name, unit, ba.n, ba.n_excluded] + [f"{v:.9g}" for v in (
                icc.value, icc.ci_low, icc.ci_high, ba.bias_pct, ba.bias_abs, ba.sd_pct,
                ba.loa_low_pct, ba.loa_high_pct, ba.slope, ba.r2, ba.p_value)])
            lines.append(clinstats.format_report(name, unit, icc, ba))
    text = "\n".join(lines) + "\n"
    out.with_suffix(".txt").write_text(text)
    print(text, end="")


def cmd_phase_dump(o: dict) -> None:
    """Phase maps mapped linearly from [-pi/2, pi/2] to 0..255."""
    if o["checkpoint"]:
        block = _load_model(o["checkpoint"]).mono
        if block is None:
            raise UsageError("checkpoint has no Mono block (base variant)")
    else:
        block = MonoBlock()
    raw = read_pgm(o["image"])
    x = torch.from_numpy(zscore(raw)).double()[None, None]
    with torch.no_grad():
        phase = block.double().local_phase(x)[0].numpy()
    if not np.isfinite(phase).all():
        raise NumericError("non-finite phase values")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for f in range(block.k):
        for s in range(block.m):
            img = (phase[f * block.m + s] / np.pi + 0.5) * 255
            write_pgm(out / f"phase_f{f}_s{s}.pgm", img)
    print(f"wrote {block.k * block.m} phase maps to {out}")


def cmd_summary(o: dict) -> None:
    names = [o["variant"]] if o["variant"] else list(VARIANTS)
    base = _spec("base", o["channels"], o["stages"], o["input_size"])
    base_params = param_formula(base)["total"]
    print(f"{'variant':<19} {'params':>8} {'extra':>6} {'FLOPs':>14} {'GFLOPs':>7}")
    for name in names:
        spec = _spec(name, o["channels"], o["stages"], o["input_size"])
        params = param_formula(spec)["total"]
        flops = count_flops(spec)["total"]
        label = spec.variant + ("=full" if spec.variant == ALIASES["full"] else "")
        print(f"{label:<19} {params:>8d} {params - base_params:>+6d} {flops:>14d} "
              f"{flops / 1e9:>7.3f}")


COMMANDS = {"phantom-gen": cmd_phantom_gen, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "clinstats": cmd_clinstats, "phase-dump": cmd_phase_dump,
            "summary": cmd_summary}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        opts = resolve(args.command, args)
        print(f"seed: {opts['seed']}", flush=True)
        COMMANDS[args.command](opts)
    except MonoUNetError as exc:
        print(f"monounet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
