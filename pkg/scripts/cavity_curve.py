"""Learning curve of the cavity feedback task: P(target) per update, smoothed.

usage: python3 scripts/cavity_curve.py runs/cavity-seed0 [window]
Reads metrics.csv written by `qflrl run cavity` and prints a coarse text plot
next to the constant-drive baseline and the coherent-state ceiling.
"""
import csv
import json
import sys
from pathlib import Path

import numpy as np


def main(run_dir, window=20):
    run_dir, window = Path(run_dir), int(window)
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    p = np.array([float(r["mean_p_target"]) for r in rows])
    summary = json.loads((run_dir / "summary.json").read_text())["metrics"]
    base, ceil = summary["baseline_best_constant_drive"], summary["coherent_ceiling"]
    smooth = np.convolve(p, np.ones(window) / window, mode="valid")
    width = 60
    for i in range(0, len(smooth), max(1, len(smooth) // 25)):
        bar = int(round(width * smooth[i] / max(ceil, smooth.max())))
        print(f"{i + window:5d} {smooth[i]:.3f} " + "#" * bar)
    print(f"baseline {base:.4f}  ceiling {ceil:.4f}  eval {summary['eval_mean_p_target']:.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
