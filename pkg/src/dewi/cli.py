"""Command-line entry point: ``dewi {train,eval,infer,bench,synth,gradcheck}``.

Machine-readable results go to stdout, progress and warnings to stderr.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Any config key can be overridden with ``--key=value``; ``DEWI_THREADS``
caps BLAS threads (default 1, which keeps runs bitwise reproducible).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiment as X
from .augment import apply_transforms, resize_image
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ALL_KEYS, PRESETS, ConfigError, RunConfig, apply_overrides, dump_config,
                     format_value, load_config)
from .data import IMAGE_SUFFIXES, export_dataset, read_image, synth_dataset
from .metrics import evaluate_predictions, read_prediction_file
from .model import build_model, classify, embed
from .tensor import Tensor, no_grad
from .trainer import EpochLog, NonFiniteGradient, TrainingDiverged, evaluate

logger = logging.getLogger("dewi")

CHECKPOINT_NAME = "checkpoint.dewi"
EPOCH_LOG_NAME = "epochs.tsv"
REPORT_NAME = "report.txt"
CONFIG_NAME = "config.txt"


class UsageError(Exception):
    """Bad flags, config keys or input paths (exit 1)."""


# ---------------------------------------------------------------------------
# argument handling


def _split_overrides(extra: list) -> dict:
    """``--key=value`` / ``--key value`` pairs for config keys."""
    out, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{body}")
            key, value = body, extra[i + 1]
            i += 1
        key = key.replace("-", "_")
        if key not in ALL_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = value
        i += 1
    return out


def _run_config(args, overrides: dict) -> RunConfig:
    flags = {}
    if args.seed is not None:
        flags["seed"] = str(args.seed)
    if args.mode is not None:
        flags["mode"] = args.mode
    flags.update(overrides)
    return load_config(args.config, args.preset, flags)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--preset", default="desk", choices=PRESETS)
    p.add_argument("--data", help="class-folder tree or manifest file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dewi", description=__doc__.splitlines()[0],
                                     epilog="Config keys may be given as --key=value.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and report on the test split")
    _add_common(p)
    p.add_argument("--synthetic", action="store_true", help="train on generated data instead of --data")
    p.add_argument("--per-class", type=int, default=X.DESK_PER_CLASS)

    p = sub.add_parser("eval", help="metrics from a checkpoint or a prediction file")
    _add_common(p)
    p.add_argument("--predictions", help="tab-separated id, predicted, true index file")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))

    p = sub.add_parser("infer", help="predict class and probability per image")
    _add_common(p)
    p.add_argument("paths", nargs="+", help="image files or directories")

    p = sub.add_parser("bench", help="mean per-image eval inference time")
    _add_common(p)
    p.add_argument("--size", default=None, help="input HxW (default: the config's input_size)")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("synth", help="write a synthetic class-folder dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--composite-points", type=int, default=100)
    p.add_argument("--coords", type=int, default=1, help="coordinates sampled per parameter tensor")
    return parser


def _require(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag} path not found: {p}")
    return p


def _status(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, overrides) -> int:
    run = _run_config(args, overrides)
    if not args.out:
        raise UsageError("--out is required")
    if args.synthetic:
        splits = X.synthetic_splits(run, per_class=args.per_class)
    else:
        dataset = X.load_dataset(_require(args.data, "--data"), run)
        try:
            X.check_classes(run, dataset)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        splits = X.split(dataset, run)
    out = X.ensure_dir(args.out)
    (out / CONFIG_NAME).write_text(dump_config(run))
    _status(f"train {len(splits.train)} / val {len(splits.val)} / test {len(splits.test)} samples")
    log_path = out / EPOCH_LOG_NAME
    with open(log_path, "w") as log:
        log.write(EpochLog.HEADER + "\n")

        def on_epoch(entry: EpochLog) -> None:
            log.write(entry.to_tsv() + "\n")
            log.flush()
            _status(f"epoch {entry.epoch}: lr {entry.lr:.3g} val acc {entry.val_acc:.4f}")

        result = X.train_run(run, splits, on_epoch)
    extra = {"run_config": {k: _jsonable(v) for k, v in run.as_flat().items()},
             "class_names": splits.class_names}
    save_checkpoint(result.model, out / CHECKPOINT_NAME, result.state, run.train, extra)
    (out / REPORT_NAME).write_text(result.test.to_text() + "\n")
    print(result.test.to_text())
    return 0


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _load(args):
    path = _require(args.checkpoint, "--checkpoint")
    model, _, _, extra = load_checkpoint(path, with_extra=True)
    extra = extra or {}
    stored = extra.get("run_config")
    run = RunConfig() if stored is None else apply_overrides(RunConfig(), _as_text(stored))
    run = dataclasses.replace(run, model=model.config)
    return model, run, extra.get("class_names") or [str(k) for k in range(model.config.num_classes)]


def _as_text(flat: dict) -> dict:
    return {k: format_value(tuple(v) if isinstance(v, list) else v) for k, v in flat.items()}


def cmd_eval(args, overrides) -> int:
    if args.predictions:
        ids, pred, true = read_prediction_file(_require(args.predictions, "--predictions"))
        K = int(max(pred.max(initial=-1), true.max(initial=-1))) + 1
        if overrides.get("num_classes"):
            K = int(overrides["num_classes"])
        print(evaluate_predictions(pred, true, K).to_text())
        return 0
    model, run, _ = _load(args)
    dataset = X.load_dataset(_require(args.data, "--data"), run)
    if dataset.num_classes != model.config.num_classes:
        raise UsageError(f"checkpoint has {model.config.num_classes} classes but the data has "
                         f"{dataset.num_classes}")
    part = dataset if args.split == "all" else getattr(X.split(dataset, run), args.split)
    report = evaluate(model, part, run.train.batch_size, run.transforms)[0]
    print(report.to_text())
    return 0


def _image_paths(paths: list) -> list:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(f for f in p.rglob("*") if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"path not found: {p}")
    return out


def cmd_infer(args, overrides) -> int:
    model, run, names = _load(args)
    paths = _image_paths(args.paths)
    if not paths:
        raise UsageError("no images found")
    ok = 0
    for path in paths:
        try:
            img = read_image(path, model.config.input_channels)
        except Exception as exc:  # undecodable files are skipped
            logger.warning("skipping %s: %s", path, exc)
            continue
        if run.transforms.resize is not None:
            img = resize_image(img, run.transforms.resize)
        x = apply_transforms(img, run.transforms, "eval")[None]
        with no_grad():
            probs = classify(model, embed(model, Tensor(x), "eval"), "eval").data[0]
        k = int(probs.argmax())
        print(f"{path}\t{names[k]}\t{probs[k]:.6f}")
        ok += 1
    if ok == 0:
        _status("no image could be decoded")
        return 2
    return 0


def _parse_size(text: str) -> tuple:
    parts = text.lower().replace("x", ",").split(",")
    try:
        size = tuple(int(p) for p in (parts * 2 if len(parts) == 1 else parts))
    except ValueError:
        raise UsageError(f"bad size {text!r}") from None
    if len(size) != 2 or min(size) < 1:
        raise UsageError(f"bad size {text!r}")
    return size


def bench_model(model, size: tuple, reps: int, warmup: int = 3, seed: int = 0) -> tuple:
    """Mean and standard deviation (ms) of single-image eval forward passes."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, model.config.input_channels, *size)))
    times = []
    with no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            classify(model, embed(model, x, "eval"), "eval")
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(times)), float(np.std(times))


def cmd_bench(args, overrides) -> int:
    if args.reps < 10:
        raise UsageError(f"--reps must be at least 10, got {args.reps}")
    if args.warmup < 0:
        raise UsageError("--warmup must be nonnegative")
    if args.checkpoint:
        model, run, _ = _load(args)
    else:
        run = _run_config(args, overrides)
        model = X.init_model(run)
        model.bn_updates = 1  # running statistics at their initial values are fine for timing
    size = _parse_size(args.size) if args.size else tuple(model.config.input_size)
    if size != tuple(model.config.input_size):
        resized = build_model(dataclasses.replace(model.config, input_size=size), np.random.default_rng(0))
        resized.load_state(model.state_arrays())
        resized.bn_updates = max(1, model.bn_updates)
        model = resized
    mean, std = bench_model(model, size, args.reps, args.warmup)
    print(f"it_ms: {mean:.3f} ± {std:.3f}")
    return 0


def cmd_synth(args, overrides) -> int:
    if not args.out:
        raise UsageError("--out is required")
    if args.classes < 2 or args.per_class < 1 or args.size < 1:
        raise UsageError("need --classes >= 2, --per-class >= 1 and --size >= 1")
    ds = synth_dataset(args.classes, args.per_class, args.size, args.noise, args.seed or 0)
    manifest = export_dataset(ds, X.ensure_dir(args.out))
    print(f"wrote {len(manifest)} images in {manifest.num_classes} classes to {args.out}")
    return 0


def cmd_gradcheck(args, overrides) -> int:
    from .gradcheck import TOLERANCE, check_composite, check_primitives

    seed = args.seed or 0
    results = check_primitives(args.points, seed)
    results.append(check_composite(args.composite_points, seed, args.coords))
    for r in results:
        tag = "ok" if r.passed() else "FAIL"
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{tag}")
    worst = max(r.max_rel_error for r in results)
    print(f"max_rel_error: {worst:.3e}")
    failed = [r.name for r in results if not r.passed()]
    if failed:
        _status(f"above tolerance {TOLERANCE:g}: {', '.join(failed)}")
        return 2
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench,
            "synth": cmd_synth, "gradcheck": cmd_gradcheck}


def _thread_limit() -> int:
    raw = os.environ.get("DEWI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEWI_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DEWI_THREADS must be >= 1, got {n}")
    return n


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; usage maps to 1 here
        return 0 if exc.code == 0 else 1
    try:
        overrides = _split_overrides(extra)
        threads = _thread_limit()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, overrides)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        _status(f"error: {exc}")
        return 1
    except (CheckpointError, TrainingDiverged, NonFiniteGradient, OSError, ValueError) as exc:
        _status(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
