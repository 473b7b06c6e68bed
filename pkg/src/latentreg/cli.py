"""``latentreg`` command line: generate, warmup, grpo, infer, eval, ablate, probe-ldvn.

Everything a command produces lands under ``--out`` (default: the config's
``out_dir``). Each command writes ``<command>.config.json`` next to its
outputs; passing that file back through ``--config`` reruns the command
bit-identically.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .fields import warp_volume
from .grpo import GrpoConfig
from .network import CheckpointError, RegNet, load_checkpoint, save_checkpoint
from .oracles import ldvn_variance_probe, probe_csv
from .synthdata import KIND_FIELD, KIND_INTENSITY, FormatError, load_manifest, load_split, write_dataset, write_volume
from .training import NumericAbort, PreflightError, evaluate, infer_multistep, preflight, run_grpo, run_warmup

log = logging.getLogger("latentreg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write(path, buf.getvalue())


def write_provenance(out: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    """The rerunnable config plus a sidecar with the code version and flags."""
    atomic_write(out / f"{command}.config.json", dump_config(cfg) + "\n")
    write_json(out / f"{command}.provenance.json", {
        "command": command,
        "code_version": __version__,
        "seed": cfg.seed,
        "data_seed": cfg.data_seed,
        "flags": extra or {},
    })


# ----------------------------------------------------------------------------
# stage helpers


def data_dir(out: Path) -> Path:
    return out / "data"


def load_pairs(out: Path, split: str):
    d = data_dir(out)
    if not (d / "manifest.json").exists():
        raise DataError(f"no dataset at {d}; run `latentreg generate` first")
    try:
        return load_split(d, split)
    except (FileNotFoundError, KeyError) as exc:
        raise DataError(f"dataset at {d} is incomplete: {exc}") from exc


def new_net(cfg: ExperimentConfig) -> RegNet:
    return RegNet(cfg.backbone, seed=cfg.seed)


def load_net(cfg: ExperimentConfig, path: Path) -> RegNet:
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    net = new_net(cfg)
    net.load_state_dict(load_checkpoint(path))
    return net


def stage_warmup(cfg: ExperimentConfig, out: Path) -> tuple[RegNet, list[dict]]:
    train = load_pairs(out, "unlabeled")
    val = load_pairs(out, "val")
    net = new_net(cfg)
    rows: list[dict] = []

    def flush(row):
        rows.append(row)
        write_csv(out / "warmup_metrics.csv", rows)

    run_warmup(net, train, val, cfg.warmup, seed=cfg.seed, num_classes=cfg.num_classes, on_epoch=flush)
    save_checkpoint(out / "warmup.ckpt", net.state_dict())
    return net, rows


def stage_grpo(cfg: ExperimentConfig, out: Path, net: RegNet, grpo: GrpoConfig,
               tag: str = "grpo") -> list[dict]:
    train = load_pairs(out, "labeled")
    val = load_pairs(out, "val")
    spatial = (cfg.scene.grid,) * 3
    preflight(spatial, cfg.backbone.channels, grpo.trajectories, cfg.memory_budget_mb)
    rows: list[dict] = []

    def flush(row):
        rows.append(row)
        write_csv(out / f"{tag}_metrics.csv", rows)

    traj_path = out / f"{tag}_trajectories.jsonl"
    tmp = traj_path.with_name(traj_path.name + ".tmp")
    with open(tmp, "w") as fh:
        run_grpo(net, train, val, grpo, cfg.warmup.weights, seed=cfg.seed,
                 num_classes=cfg.num_classes, on_epoch=flush, trajectory_log=fh)
    tmp.replace(traj_path)
    save_checkpoint(out / f"{tag}.ckpt", net.state_dict())
    return rows


def summarize(ev: dict) -> dict:
    return {k: ev[k] for k in ("steps", "dice_mean", "dice_std", "njd_mean", "njd_std")}


# ----------------------------------------------------------------------------
# commands


def cmd_generate(cfg, out: Path, args) -> dict:
    d = data_dir(out)
    if (d / "manifest.json").exists() and not args.force:
        raise DataError(f"{d} already holds a dataset; pass --force to overwrite")
    manifest = write_dataset(d, cfg.scene, cfg.counts)
    write_provenance(out, "generate", cfg)
    log.info("wrote %d pairs to %s", len(manifest["pairs"]), d)
    return manifest


def cmd_warmup(cfg, out: Path, args) -> list[dict]:
    _, rows = stage_warmup(cfg, out)
    write_provenance(out, "warmup", cfg)
    return rows


def cmd_grpo(cfg, out: Path, args) -> list[dict]:
    if args.checkpoint:
        net = load_net(cfg, Path(args.checkpoint))
    elif cfg.no_warmup:
        net = new_net(cfg)
    else:
        ckpt = out / "warmup.ckpt"
        if not ckpt.exists():
            raise DataError(f"grpo needs a warm-up checkpoint at {ckpt} (or --no-warmup)")
        net = load_net(cfg, ckpt)
    rows = stage_grpo(cfg, out, net, cfg.grpo)
    write_provenance(out, "grpo", cfg, {"no_warmup": cfg.no_warmup,
                                        "checkpoint": args.checkpoint})
    return rows


def default_checkpoint(out: Path) -> Path:
    for name in ("grpo.ckpt", "warmup.ckpt"):
        if (out / name).exists():
            return out / name
    raise DataError(f"no checkpoint in {out}; pass --checkpoint")


def cmd_infer(cfg, out: Path, args) -> list[dict]:
    ckpt = Path(args.checkpoint) if args.checkpoint else default_checkpoint(out)
    net = load_net(cfg, ckpt)
    steps = cfg.grpo.steps
    rows = []
    inf_dir = out / "infer"
    inf_dir.mkdir(exist_ok=True)
    for pair in load_pairs(out, args.split):
        res = infer_multistep(net, pair, steps, cfg.num_classes, keep_field=True)
        for t in range(1, steps + 1):
            rows.append({"pair": pair.pair_id, "step": t, "dice": res.dice[t], "njd": res.njd[t]})
        write_volume(inf_dir / f"{pair.pair_id}_field.msv", res.field, KIND_FIELD)
        write_volume(inf_dir / f"{pair.pair_id}_warped.msv", warp_volume(pair.moving, res.field), KIND_INTENSITY)
    means = [{"pair": "mean", "step": t,
              "dice": float(np.mean([r["dice"] for r in rows if r["step"] == t])),
              "njd": float(np.mean([r["njd"] for r in rows if r["step"] == t]))}
             for t in range(1, steps + 1)]
    write_csv(out / "infer_steps.csv", rows + means, ["pair", "step", "dice", "njd"])
    write_provenance(out, "infer", cfg, {"checkpoint": str(ckpt), "split": args.split})
    return means


def cmd_eval(cfg, out: Path, args) -> dict:
    ckpt = Path(args.checkpoint) if args.checkpoint else default_checkpoint(out)
    net = load_net(cfg, ckpt)
    ev = evaluate(net, load_pairs(out, args.split), cfg.grpo.steps, cfg.num_classes)
    ev["checkpoint"] = ckpt.name
    write_json(out / f"eval_{ckpt.stem}_{args.split}.json", ev)
    write_provenance(out, "eval", cfg, {"checkpoint": str(ckpt), "split": args.split})
    return ev


def _warm_start(cfg, out: Path) -> RegNet:
    ckpt = out / "warmup.ckpt"
    if ckpt.exists():
        return load_net(cfg, ckpt)
    net, _ = stage_warmup(cfg, out)
    return net


def ablate_grid(cfg, out: Path, js: list[int], ts: list[int]) -> list[dict]:
    """GRPO from the shared warm-up checkpoint for every (J, T) cell."""
    base = _warm_start(cfg, out)
    test = load_pairs(out, "test")
    spatial = (cfg.scene.grid,) * 3
    rows = []
    for j in js:
        for t in ts:
            row = {"J": j, "T": t}
            try:
                preflight(spatial, cfg.backbone.channels, j, cfg.memory_budget_mb)
            except PreflightError as exc:
                log.warning("cell J=%d T=%d skipped: %s", j, t, exc)
                rows.append({**row, "status": "OOM"})
                write_csv(out / "ablate_grid.csv", rows, GRID_COLUMNS)
                continue
            net = copy.deepcopy(base)
            stage_grpo(cfg, out, net, replace(cfg.grpo, trajectories=j, steps=t), tag=f"grid_J{j}_T{t}")
            rows.append({**row, "status": "ok", **summarize(evaluate(net, test, t, cfg.num_classes))})
            write_csv(out / "ablate_grid.csv", rows, GRID_COLUMNS)
    return rows


GRID_COLUMNS = ["J", "T", "status", "steps", "dice_mean", "dice_std", "njd_mean", "njd_std"]
LADDER = ("gaussian-head-only", "+dice", "+multi-step", "+grpo-full")


def ablate_components(cfg, out: Path) -> list[dict]:
    """Cumulative component ladder starting from the warm-up checkpoint.

    gaussian-head-only: warm-up alone, one step. +dice: deterministic (z = mu)
    fine-tuning with the soft-Dice and warm-up terms, one step. +multi-step:
    the same over T steps. +grpo-full: sampled groups with the policy term.
    """
    base = _warm_start(cfg, out)
    test = load_pairs(out, "test")
    g = cfg.grpo
    cells = {
        "+dice": replace(g, use_policy=False, steps=1),
        "+multi-step": replace(g, use_policy=False),
        "+grpo-full": g,
    }
    rows = [{"component": LADDER[0], **summarize(evaluate(base, test, 1, cfg.num_classes))}]
    write_csv(out / "ablate_components.csv", rows)
    for name, gc in cells.items():
        net = copy.deepcopy(base)
        tag = "ladder_" + name.strip("+").replace("-", "_")
        stage_grpo(cfg, out, net, gc, tag=tag)
        rows.append({"component": name, **summarize(evaluate(net, test, gc.steps, cfg.num_classes))})
        write_csv(out / "ablate_components.csv", rows)
    return rows


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_ablate(cfg, out: Path, args) -> list[dict]:
    if args.mode == "grid":
        js, ts = _int_list(args.grid_j), _int_list(args.grid_t)
        if not js or not ts or min(js) < 2 or min(ts) < 1:
            raise ConfigError("grid needs J >= 2 and T >= 1")
        rows = ablate_grid(cfg, out, js, ts)
    else:
        rows = ablate_components(cfg, out)
    write_provenance(out, "ablate", cfg, {"mode": args.mode, "grid_j": args.grid_j, "grid_t": args.grid_t})
    return rows


def cmd_probe_ldvn(cfg, out: Path, args) -> list:
    ns = _int_list(args.ns)
    rows, exponent = ldvn_variance_probe(ns, groups=args.groups, j=cfg.grpo.trajectories, seed=cfg.seed)
    atomic_write(out / "ldvn_probe.csv", probe_csv(rows, exponent))
    write_provenance(out, "probe-ldvn", cfg, {"ns": ns, "groups": args.groups})
    log.info("fitted exponent %.4f", exponent)
    return rows


COMMANDS = {
    "generate": cmd_generate,
    "warmup": cmd_warmup,
    "grpo": cmd_grpo,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "probe-ldvn": cmd_probe_ldvn,
}


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    common.add_argument("--no-warmup", action="store_true", help="grpo from a fresh network")
    common.add_argument("--ldvn-off", action="store_true", help="score log-likelihoods without 1/sqrt(N)")
    common.add_argument("--steps", type=int, help="refinement steps T")
    common.add_argument("--trajs", type=int, help="trajectories per group J")
    common.add_argument("--checkpoint", help="explicit checkpoint path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"latentreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "warmup", "grpo"):
        sub.add_parser(name, parents=[common])
    for name in ("infer", "eval"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--split", default="test", choices=["labeled", "val", "test"])
    sp = sub.add_parser("ablate", parents=[common])
    sp.add_argument("--mode", choices=["grid", "components"], default="grid")
    sp.add_argument("--grid-j", default="2,6")
    sp.add_argument("--grid-t", default="1,3")
    sp = sub.add_parser("probe-ldvn", parents=[common])
    sp.add_argument("--ns", default="100,1000,10000,100000")
    sp.add_argument("--groups", type=int, default=256)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    g = cfg.grpo
    try:
        if args.trajs is not None:
            g = replace(g, trajectories=args.trajs)
        if args.steps is not None:
            g = replace(g, steps=args.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.ldvn_off:
        g = replace(g, ldvn=False)
    cfg.grpo = g
    if args.no_warmup:
        cfg.no_warmup = True
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except NumericAbort as exc:
        write_json(Path(cfg.out_dir) / "numeric_abort.json", exc.dump)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, CheckpointError, PreflightError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
