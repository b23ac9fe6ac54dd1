"""Print one line of headline metrics per run directory found under a root."""
import json
import sys
from pathlib import Path


def scalar_items(metrics):
    for k, v in metrics.items():
        if isinstance(v, bool) or isinstance(v, (int, float)):
            yield k, v


def main(root="runs"):
    for path in sorted(Path(root).glob("*/summary.json")):
        s = json.loads(path.read_text())
        cells = [f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                 for k, v in scalar_items(s["metrics"])]
        print(f"{path.parent.name:<24} {s['wall_clock_seconds']:8.1f}s  " + "  ".join(cells))


if __name__ == "__main__":
    main(*sys.argv[1:])
