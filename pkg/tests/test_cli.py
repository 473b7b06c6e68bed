import csv
import hashlib
import json

import numpy as np
import pytest

from latentreg.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from latentreg.config import ConfigError, ExperimentConfig, load_config
from latentreg.synthdata import KIND_INTENSITY, write_volume

TINY = {
    "counts": {"unlabeled": 3, "labeled": 2, "val": 1, "test": 2},
    "warmup": {"epochs": 2},
    "grpo": {"epochs": 2, "trajectories": 2, "steps": 2},
}


@pytest.fixture
def tiny(tmp_path):
    cfg = {**TINY, "out_dir": str(tmp_path / "run")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "run"


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_empty_config_is_reference():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.counts == {"unlabeled": 40, "labeled": 10, "val": 4, "test": 8}
    assert cfg.scene.grid == 16 and cfg.grpo.trajectories == 6 and cfg.grpo.steps == 3


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seed": 4, "grpo": {"lr": 5e-4}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"counts": {"train": 3}}, {"scene": {"grid": 2}},
                                 {"grpo": {"trajectories": 1}}, []])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_generate_counts_and_force(tiny):
    cfg, out = tiny
    assert main(["generate", "--config", str(cfg)]) == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 8
    assert main(["generate", "--config", str(cfg)]) == EXIT_DATA
    assert main(["generate", "--config", str(cfg), "--force"]) == 0


def test_generate_is_deterministic(tmp_path):
    hashes = []
    for sub in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / sub), "--seed", "3"]) == 0
        hashes.append(digest(tmp_path / sub / "data" / "manifest.json"))
    assert hashes[0] == hashes[1]
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 62


def test_amplitude_zero_manifest(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"scene": {"amplitude": 0.0}, "counts": {"unlabeled": 2, "labeled": 0,
                                                                      "val": 1, "test": 1}}))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
    manifest = json.loads((tmp_path / "r" / "data" / "manifest.json").read_text())
    assert all(p["summary"]["dice_identity"] == 100.0 for p in manifest["pairs"])


def test_stage_ordering(tiny):
    cfg, out = tiny
    assert main(["warmup", "--config", str(cfg)]) == EXIT_DATA
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["grpo", "--config", str(cfg)]) == EXIT_DATA
    assert main(["infer", "--config", str(cfg)]) == EXIT_DATA
    assert main(["grpo", "--config", str(cfg), "--no-warmup"]) == 0


def test_full_pipeline_and_rerun(tiny, tmp_path):
    cfg, out = tiny
    for cmd in ("generate", "warmup", "grpo", "infer", "eval"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    rows = read_csv(out / "warmup_metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert {"loss", "mse", "reg", "kl", "val_dice", "val_njd", "tau"} <= set(rows[0])
    grows = read_csv(out / "grpo_metrics.csv")
    assert {"policy", "warm", "dice_loss", "tau", "logpi_std", "val_dice"} <= set(grows[0])
    steps = read_csv(out / "infer_steps.csv")
    assert [r["step"] for r in steps if r["pair"] == "mean"] == ["1", "2"]
    assert (out / "infer" / "test-000_field.msv").exists()
    ev = json.loads((out / "eval_grpo_test.json").read_text())
    assert len(ev["pairs"]) == 2
    lines = (out / "grpo_trajectories.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 2 * 2 * 2
    assert {"reward", "advantage", "rel_log_pi", "selected"} <= set(json.loads(lines[0]))
    prov = json.loads((out / "grpo.provenance.json").read_text())
    assert prov["code_version"] and prov["seed"] == 0

    # rerun warm-up and grpo from the emitted configs into a fresh directory
    rerun = tmp_path / "rerun"
    assert main(["generate", "--config", str(out / "generate.config.json"), "--out", str(rerun)]) == 0
    assert main(["warmup", "--config", str(out / "warmup.config.json"), "--out", str(rerun)]) == 0
    assert main(["grpo", "--config", str(out / "grpo.config.json"), "--out", str(rerun)]) == 0
    for name in ("warmup_metrics.csv", "grpo_metrics.csv", "grpo_trajectories.jsonl", "grpo.ckpt"):
        assert digest(out / name) == digest(rerun / name), name


def test_flag_overrides(tiny):
    cfg, out = tiny
    main(["generate", "--config", str(cfg)])
    assert main(["grpo", "--config", str(cfg), "--no-warmup", "--trajs", "3", "--steps", "1",
                 "--ldvn-off", "--seed", "5"]) == 0
    saved = json.loads((out / "grpo.config.json").read_text())
    assert saved["grpo"]["trajectories"] == 3 and saved["grpo"]["steps"] == 1
    assert saved["grpo"]["ldvn"] is False and saved["seed"] == 5 and saved["no_warmup"] is True


def test_config_error_exit(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["grpo", "--trajs", "1", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_checkpoint_mismatch_is_data_error(tiny, tmp_path):
    cfg, out = tiny
    main(["generate", "--config", str(cfg)])
    main(["warmup", "--config", str(cfg)])
    other = tmp_path / "wide.json"
    other.write_text(json.dumps({**TINY, "out_dir": str(out), "backbone": {"channels": [4, 8, 16]}}))
    assert main(["eval", "--config", str(other)]) == EXIT_DATA


def test_numeric_abort_exit(tiny):
    cfg, out = tiny
    main(["generate", "--config", str(cfg)])
    path = out / "data" / "unlabeled-000_moving.msv"
    write_volume(path, np.full((16, 16, 16), np.nan), KIND_INTENSITY)
    assert main(["warmup", "--config", str(cfg)]) == EXIT_NUMERIC
    dump = json.loads((out / "numeric_abort.json").read_text())
    assert dump["stage"] == "warmup" and dump["pair"] == "unlabeled-000"


def test_ablate_grid_marks_oom(tiny):
    cfg, out = tiny
    main(["generate", "--config", str(cfg)])
    assert main(["ablate", "--config", str(cfg), "--grid-j", "2,100000", "--grid-t", "1"]) == 0
    rows = read_csv(out / "ablate_grid.csv")
    assert [(r["J"], r["status"]) for r in rows] == [("2", "ok"), ("100000", "OOM")]


def test_ablate_components(tiny):
    cfg, out = tiny
    main(["generate", "--config", str(cfg)])
    assert main(["ablate", "--config", str(cfg), "--mode", "components"]) == 0
    rows = read_csv(out / "ablate_components.csv")
    assert [r["component"] for r in rows] == ["gaussian-head-only", "+dice", "+multi-step", "+grpo-full"]
    assert [r["steps"] for r in rows] == ["1", "1", "2", "2"]


def test_probe_ldvn(tmp_path):
    assert main(["probe-ldvn", "--out", str(tmp_path), "--ns", "10,100,1000", "--groups", "64"]) == 0
    rows = read_csv(tmp_path / "ldvn_probe.csv")
    assert [r["N"] for r in rows] == ["10", "100", "1000"]
