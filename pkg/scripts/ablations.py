"""Trajectory/step grid and cumulative component ladder from one warm-up checkpoint.

    python scripts/ablations.py --out runs/ablate --grid-j 2,4,6 --grid-t 1,2,3
"""

import argparse
import csv
import sys
from pathlib import Path

from latentreg.cli import main


def step(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def show(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    cols = list(rows[0])
    cells = [list(cols)] + [[r[c][:10] if c.endswith(("mean", "std")) else r[c] for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    print(path.name)
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def cli():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--config")
    p.add_argument("--grid-j", default="2,4,6")
    p.add_argument("--grid-t", default="1,2,3")
    p.add_argument("--skip-ladder", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    extra = ["--config", args.config] if args.config else []
    if not (out / "data" / "manifest.json").exists():
        step("generate", "--out", out, *extra)
    if not (out / "warmup.ckpt").exists():
        step("warmup", "--out", out, *extra)
    step("ablate", "--out", out, *extra, "--mode", "grid", "--grid-j", args.grid_j, "--grid-t", args.grid_t)
    show(out / "ablate_grid.csv")
    if not args.skip_ladder:
        step("ablate", "--out", out, *extra, "--mode", "components")
        show(out / "ablate_components.csv")


if __name__ == "__main__":
    cli()
