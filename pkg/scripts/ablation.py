"""Desk-scale ablation sweeps on the synthetic dataset.

Each sweep trains the desk preset once per setting (and per seed) and writes
one tab-separated row per run: sweep, setting, seed, train/test Acc, test mF1,
test GM, wall time.

    python scripts/ablation.py --sweep components --out results/components.tsv
    python scripts/ablation.py --sweep all --epochs 30 --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from dewi import experiment as X
from dewi.config import apply_overrides, preset

SWEEPS = {
    "components": [{"mode": m} for m in ("dewi", "deep_only", "wide_only", "mixup_all", "single_projector")],
    "batch_size": [{"batch_size": str(b)} for b in (16, 32, 64)],
    "margin": [{"margin": str(m)} for m in (0.1, 0.2, 0.5, 1.0)],
    "alpha": [{"mixup_alpha": str(a)} for a in (0.5, 1.0, 2.0)],
    "losses": [{"contrastive": c} for c in ("triplet", "ntxent", "circle")],
    "pretext": [{"mode": "dewi"}, {"mode": "pretext"}],
}

HEADER = "sweep\tsetting\tseed\ttrain_acc\ttest_acc\ttest_mf1\ttest_gm\tseconds"


def label(setting: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in setting.items())


def run_one(setting: dict, seed: int, epochs: int, splits) -> tuple:
    run = apply_overrides(preset("desk"), {**setting, "seed": str(seed), "epochs": str(epochs)})
    if run.train.mode == "pretext":
        run = apply_overrides(run, {"pretext_epochs": str(epochs), "probe_epochs": str(max(1, epochs // 2))})
    t0 = time.perf_counter()
    result = X.train_run(run, splits)
    return result, time.perf_counter() - t0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sweep", default="components", choices=[*SWEEPS, "all"])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", help="TSV output file (default: stdout only)")
    args = p.parse_args(argv)

    splits = X.synthetic_splits(preset("desk"), data_seed=args.data_seed)
    names = list(SWEEPS) if args.sweep == "all" else [args.sweep]
    rows = [HEADER]
    print(HEADER, flush=True)
    with threadpool_limits(limits=1):
        for name in names:
            for setting in SWEEPS[name]:
                for seed in args.seeds:
                    res, secs = run_one(setting, seed, args.epochs, splits)
                    row = (f"{name}\t{label(setting)}\t{seed}\t{res.train.acc:.4f}\t{res.test.acc:.4f}\t"
                           f"{res.test.mf1:.4f}\t{res.test.gm:.4f}\t{secs:.1f}")
                    rows.append(row)
                    print(row, flush=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(rows) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
