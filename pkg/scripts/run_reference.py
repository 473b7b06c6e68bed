"""Default task end to end: data, warm-up, GRPO, then test Dice for both checkpoints.

    python scripts/run_reference.py --out runs/reference [--config cfg.json]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from latentreg.cli import load_net, load_pairs, main
from latentreg.config import load_config
from latentreg.training import evaluate


def step(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def cli():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/reference")
    p.add_argument("--config")
    p.add_argument("--no-warmup", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    extra = ["--config", args.config] if args.config else []
    t0 = time.perf_counter()
    if not (out / "data" / "manifest.json").exists():
        step("generate", "--out", out, *extra)
    if not args.no_warmup:
        step("warmup", "--out", out, *extra)
    step("grpo", "--out", out, *extra, *(["--no-warmup"] if args.no_warmup else []))
    cfg = load_config(out / "grpo.config.json")
    test = load_pairs(out, "test")
    summary = {"seconds": round(time.perf_counter() - t0, 1)}
    ckpts = [("grpo", cfg.grpo.steps)] + ([] if args.no_warmup else [("warmup", 1)])
    for name, steps in ckpts:
        ev = evaluate(load_net(cfg, out / f"{name}.ckpt"), test, steps, cfg.num_classes)
        summary[name] = {k: ev[k] for k in ("steps", "dice_mean", "njd_mean", "per_step_dice")}
    (out / "reference_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    cli()
