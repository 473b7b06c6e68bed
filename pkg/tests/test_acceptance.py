"""End-to-end acceptance criteria, one test per criterion.

Criteria 6 to 9 share one default-task run (dataset, warm-up, GRPO J=6 T=3),
a J=2 T=1 grid cell with an oversized companion cell, a no-warm-up run and a
rerun from the emitted configs. Expect roughly a quarter of an hour on a
laptop CPU.
"""

import csv
import math
import shutil
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from test_fields import smooth_field

from gradcheck import max_rel_error
from latentreg import autodiff as ad
from latentreg.autodiff import Var
from latentreg.cli import load_net, load_pairs, main
from latentreg.config import load_config
from latentreg.fields import compose, identity_field, njd_percent, warp_labels, warp_volume
from latentreg.grpo import center, grpo_total_loss, policy_loss, relative_log_likelihoods
from latentreg.network import LatentPolicy, RegNet, log_pi, sample_latent
from latentreg.objectives import WarmupWeights, hard_dice, soft_dice_loss, warmup_loss
from latentreg.oracles import brute_dice, brute_njd, ldvn_variance_probe
from latentreg.training import evaluate

pytestmark = pytest.mark.slow

OVERSIZED_J = 512


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"latentreg {' '.join(map(str, argv))} exited with {code}"


# ----------------------------------------------------------------------------
# 1. shifting and scaling log-likelihoods leaves the update direction alone


def test_criterion_1_affine_identity(verdict):
    rng = np.random.default_rng(1)
    net = RegNet(seed=1)
    j = 6
    worst_loss = worst_dir = 0.0
    for _ in range(100):
        c, b = rng.uniform(0.1, 10), rng.uniform(-5, 5)
        moving, fixed = (gaussian_filter(rng.random((16, 16, 16)), 1.0) for _ in range(2))
        _, p = net.encode(moving, fixed, tau=1.0)
        assert p.n == 2048
        zs = [sample_latent(p, rng)[0].value for _ in range(j)]
        advs = rng.standard_normal(j)

        def loss_and_grad(transform):
            _, p = net.encode(moving, fixed, tau=1.0)
            loss = policy_loss(advs, center([transform(p, z) for z in zs]))
            g = np.concatenate([x.ravel() for x in ad.backward(loss, net.params).values()])
            return loss.item(), g

        base, g0 = loss_and_grad(lambda p, z: log_pi(p, z, 1.0))
        moved, g1 = loss_and_grad(lambda p, z: log_pi(p, z, c) + b)
        worst_loss = max(worst_loss, abs(moved - base / c) / max(abs(base / c), 1e-300))
        worst_dir = max(worst_dir, float(np.abs(g0 / np.linalg.norm(g0) - g1 / np.linalg.norm(g1)).max()))
    ok = worst_loss <= 1e-10 and worst_dir <= 1e-10
    assert verdict(1, ok, f"max loss rel err {worst_loss:.2e}, max direction diff {worst_dir:.2e}")


# ----------------------------------------------------------------------------
# 2. summed log-likelihood spread grows like sqrt(N); dividing by sqrt(N) flattens it


def test_criterion_2_variance_exponent(verdict):
    rows, exponent = ldvn_variance_probe([100, 1000, 10_000, 100_000], groups=256, j=6, seed=0)
    scaled = [r.std_scaled for r in rows]
    ratio = max(scaled) / min(scaled)
    ok = abs(exponent - 0.5) <= 0.05 and ratio <= 1.5
    assert verdict(2, ok, f"exponent {exponent:.4f}, scaled max/min {ratio:.3f}")


# ----------------------------------------------------------------------------
# 3. gradients of every differentiable op and the composite losses vs finite differences


def _away_from(x, points, gap=1e-3):
    def skip(name, idx):
        return any(abs(x[name][idx] - p) < gap for p in points.get(name, ()))
    return skip


def _op_cases(rng):
    x = rng.uniform(0.1, 1.5, (8, 8, 8)) * rng.choice([-1, 1], (8, 8, 8))
    y = rng.standard_normal((8, 8, 8))
    vol = gaussian_filter(rng.standard_normal((2, 8, 8, 8)), (0, 1, 1, 1))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
    bias = rng.standard_normal(3)
    coarse = rng.standard_normal((2, 4, 4, 4))
    u = smooth_field(rng, amp=1.3) + 0.37
    u2 = smooth_field(rng, amp=0.8) + 0.23
    clip_x = rng.uniform(-2, 2, (8, 8, 8))
    cases = {
        "add": (lambda v: ad.add(v["a"], v["b"]), {"a": x, "b": y}),
        "sub": (lambda v: ad.sub(v["a"], v["b"]), {"a": x, "b": y}),
        "mul": (lambda v: ad.mul(v["a"], v["b"]), {"a": x, "b": y}),
        "div": (lambda v: ad.div(v["a"], ad.exp(v["b"])), {"a": x, "b": y * 0.3}),
        "neg": (lambda v: ad.neg(v["a"]), {"a": x}),
        "exp": (lambda v: ad.exp(v["a"]), {"a": x}),
        "log": (lambda v: ad.log(v["a"]), {"a": np.abs(x)}),
        "tanh": (lambda v: ad.tanh(v["a"]), {"a": x}),
        "square": (lambda v: ad.square(v["a"]), {"a": x}),
        "leaky_relu": (lambda v: ad.leaky_relu(v["a"]), {"a": x}),
        "clip": (lambda v: ad.clip(v["a"], -1.0, 1.0), {"a": clip_x}),
        "sum": (lambda v: ad.sum(v["a"], axes=(0,)), {"a": x}),
        "mean": (lambda v: ad.mean(v["a"], axes=(1, 2)), {"a": x}),
        "reshape": (lambda v: ad.reshape(v["a"], (-1,)), {"a": x}),
        "getitem": (lambda v: ad.getitem(v["a"], (slice(2, 6), slice(None), 3)), {"a": x}),
        "concat": (lambda v: ad.concat([v["a"], v["b"]], axis=1), {"a": x, "b": y}),
        "stack": (lambda v: ad.stack([v["a"], v["b"]]), {"a": x, "b": y}),
        "dot": (lambda v: ad.dot(ad.reshape(v["a"], (-1,)), ad.reshape(v["b"], (-1,))), {"a": x, "b": y}),
        "conv3d": (lambda v: ad.conv3d(v["x"], v["w"], v["b"], 1, 1), {"x": vol, "w": w, "b": bias}),
        "conv3d_stride2": (lambda v: ad.conv3d(v["x"], v["w"], v["b"], 2, 1), {"x": vol, "w": w, "b": bias}),
        "upsample": (lambda v: ad.upsample(v["x"], 2), {"x": coarse}),
        "warp": (lambda v: warp_volume(v["x"], v["u"]), {"x": vol, "u": u}),
        "compose": (lambda v: compose(v["a"], v["b"]), {"a": u, "b": u2}),
    }
    kinks = {"leaky_relu": {"a": (0.0,)}, "clip": {"a": (-1.0, 1.0)}}
    return cases, kinks


def _composite_cases(rng):
    fixed, moving = (gaussian_filter(rng.random((8, 8, 8)), 1.0) for _ in range(2))
    a = np.zeros((8, 8, 8), np.uint16)
    b = np.zeros_like(a)
    a[2:6, 2:6, 1:5], a[1:3, 5:8, 5:8] = 1, 2
    b[3:7, 2:6, 2:6], b[1:4, 4:7, 5:8] = 1, 2
    u = smooth_field(rng, amp=1.0) + 0.29
    mu, ls = rng.standard_normal((2, 4, 2, 2, 2)) * 0.5
    zs = [mu + np.exp(ls) * 0.7 * rng.standard_normal(mu.shape) for _ in range(6)]
    advs = rng.standard_normal(6)
    weights = WarmupWeights(0.5, 0.1)

    def policy(v, tau=0.7):
        return LatentPolicy(v["mu"], v["ls"], 10.0, -10.0, 3.0, tau)

    def warm(v):
        return warmup_loss(fixed, moving, v["u"], policy(v, 0.0), weights)[0]

    def pol(v):
        return policy_loss(advs, relative_log_likelihoods(policy(v), zs, math.sqrt(32)))

    def total(v):
        return grpo_total_loss(pol(v), warm(v), [soft_dice_loss(a, b, v["u"], 2)], 0.8, 5.0)

    inputs = {"u": u, "mu": mu, "ls": ls}
    return {
        "warmup_loss": (warm, inputs),
        "soft_dice_loss": (lambda v: soft_dice_loss(a, b, v["u"], 2), {"u": u}),
        "policy_loss": (pol, {"mu": mu, "ls": ls}),
        "total_loss": (total, inputs),
    }


def test_criterion_3_gradients(verdict):
    rng = np.random.default_rng(3)
    cases, kinks = _op_cases(rng)
    errors = {}
    for name, (op, inputs) in cases.items():
        wt = rng.standard_normal(op({k: Var(v) for k, v in inputs.items()}).shape)
        errors[name] = max_rel_error(lambda v, op=op, wt=wt: ad.sum(op(v) * Var(wt)), inputs, h=1e-6,
                                     probes=24, skip=_away_from(inputs, kinks.get(name, {})))
    for name, (loss, inputs) in _composite_cases(rng).items():
        errors[name] = max_rel_error(loss, inputs, h=1e-6, probes=30)
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4
    assert verdict(3, ok, f"{len(errors)} checks, worst {worst} at {errors[worst]:.2e}")


# ----------------------------------------------------------------------------
# 4. Dice and NJD against explicit voxel counting


def test_criterion_4_metrics_brute_force(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(50):
        noise = gaussian_filter(rng.standard_normal((16, 16, 16)), 2.0)
        labels = np.digitize(noise, np.quantile(noise, [0.4, 0.6, 0.8])).astype(np.uint16)
        u = np.stack([gaussian_filter(rng.standard_normal((16, 16, 16)), 1.5) for _ in range(3)])
        u *= rng.uniform(0.5, 4.0) / np.abs(u).max()
        warped = warp_labels(labels, u)
        mismatches += hard_dice(labels, warped, 3) != brute_dice(labels, warped, 3)
        mismatches += njd_percent(u) != brute_njd(u)
    zero = identity_field((16, 16, 16))
    trivial = njd_percent(zero) == 0.0 and hard_dice(labels, labels, 3) == 100.0
    ok = mismatches == 0 and trivial
    assert verdict(4, ok, f"{mismatches} mismatches over 50 instances, identity checks {trivial}")


# ----------------------------------------------------------------------------
# 5. composition laws and deterministic sampling


def test_criterion_5_compose_and_sampling(verdict):
    rng = np.random.default_rng(5)
    zero = identity_field((8, 8, 8))
    laws = True
    worst = 0.0
    for _ in range(20):
        u = smooth_field(rng, amp=1.5)
        laws &= np.array_equal(compose(zero, u), u) and np.array_equal(compose(u, zero), u)
        v = gaussian_filter(rng.standard_normal((8, 8, 8)), 1.5)
        v = (v - v.min()) / (v.max() - v.min())
        u1, u2 = smooth_field(rng, amp=0.5, taper=True), smooth_field(rng, amp=0.5, taper=True)
        diff = warp_volume(warp_volume(v, u1), u2) - warp_volume(v, compose(u1, u2))
        worst = max(worst, float(np.abs(diff).max()))
    mu = Var(rng.standard_normal((4, 2, 2, 2)))
    p = LatentPolicy(mu, Var(rng.standard_normal((4, 2, 2, 2))), 10.0, -10.0, 3.0, tau=0.0)
    z, _ = sample_latent(p, rng)
    exact = np.array_equal(ad.value_of(z), mu.value)
    ok = laws and worst <= 0.05 and exact
    assert verdict(5, ok, f"identity laws {laws}, double-warp max {worst:.4f}, tau=0 exact {exact}")


# ----------------------------------------------------------------------------
# shared default-task runs for criteria 6 to 9


@pytest.fixture(scope="module")
def task(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    main_out = root / "main"
    t0 = time.perf_counter()
    run("generate", "--out", main_out)
    run("warmup", "--out", main_out)
    run("grpo", "--out", main_out)
    cfg = load_config(main_out / "grpo.config.json")
    test = load_pairs(main_out, "test")
    k = cfg.num_classes
    warm = evaluate(load_net(cfg, main_out / "warmup.ckpt"), test, 1, k)
    grpo = evaluate(load_net(cfg, main_out / "grpo.ckpt"), test, cfg.grpo.steps, k)
    elapsed = time.perf_counter() - t0
    return {"root": root, "out": main_out, "cfg": cfg, "warm": warm, "grpo": grpo, "elapsed": elapsed}


@pytest.fixture(scope="module")
def grid(task):
    out = task["out"]
    run("ablate", "--out", out, "--mode", "grid", "--grid-j", f"2,{OVERSIZED_J}", "--grid-t", "1")
    return {(int(r["J"]), int(r["T"])): r for r in read_csv(out / "ablate_grid.csv")}


@pytest.fixture(scope="module")
def cold(task):
    out = task["root"] / "cold"
    shutil.copytree(task["out"] / "data", out / "data")
    run("grpo", "--out", out, "--no-warmup")
    return read_csv(out / "grpo_metrics.csv")


def test_criterion_6_grpo_beats_warmup(task, verdict):
    w, g = task["warm"], task["grpo"]
    gain = g["dice_mean"] - w["dice_mean"]
    njd_ok = g["njd_mean"] <= 2 * w["njd_mean"] if w["njd_mean"] > 0 else g["njd_mean"] == 0
    ok = gain >= 5 and njd_ok and task["elapsed"] <= 1800
    assert verdict(6, ok, f"test Dice warm-up {w['dice_mean']:.2f} -> GRPO {g['dice_mean']:.2f} "
                          f"(gain {gain:+.2f}, need +5), NJD {w['njd_mean']:.3f} -> {g['njd_mean']:.3f}, "
                          f"{task['elapsed']:.0f} s")


def test_criterion_7_trajectories_and_steps(task, grid, verdict):
    small = grid[(2, 1)]
    big = grid[(OVERSIZED_J, 1)]
    d6, d2 = task["grpo"]["dice_mean"], float(small["dice_mean"])
    ok = small["status"] == "ok" and big["status"] == "OOM" and d6 >= d2
    assert verdict(7, ok, f"Dice J6T3 {d6:.2f} vs J2T1 {d2:.2f}, J={OVERSIZED_J} cell {big['status']}")


def test_criterion_8_warmup_steadies_grpo(task, cold, verdict):
    warm_rows = read_csv(task["out"] / "grpo_metrics.csv")
    warm_dice = np.array([float(r["val_dice"]) for r in warm_rows])
    cold_dice = np.array([float(r["val_dice"]) for r in cold])
    var_warm, var_cold = warm_dice[-20:].var(), cold_dice[-20:].var()
    target = cold_dice[-1]
    reached = np.nonzero(warm_dice >= target)[0]
    epochs_needed = int(reached[0]) + 1 if reached.size else math.inf
    ok = var_cold > var_warm and epochs_needed <= 0.6 * len(cold_dice)
    assert verdict(8, ok, f"last-20 val-Dice variance cold {var_cold:.3f} vs warm {var_warm:.3f}; "
                          f"warm reaches cold final {target:.2f} after {epochs_needed} of {len(cold_dice)} epochs")


def test_criterion_9_rerun_is_bit_identical(task, grid, verdict):
    src = task["out"]
    out = task["root"] / "rerun"
    run("generate", "--config", src / "generate.config.json", "--out", out)
    run("warmup", "--config", src / "warmup.config.json", "--out", out)
    run("ablate", "--config", src / "ablate.config.json", "--out", out,
        "--mode", "grid", "--grid-j", f"2,{OVERSIZED_J}", "--grid-t", "1")
    files = ["warmup_metrics.csv", "warmup.ckpt", "grid_J2_T1_metrics.csv",
             "grid_J2_T1_trajectories.jsonl", "grid_J2_T1.ckpt", "ablate_grid.csv"]
    differ = [f for f in files if (src / f).read_bytes() != (out / f).read_bytes()]
    ok = not differ
    assert verdict(9, ok, f"{len(files)} files compared, differing: {differ or 'none'}")


def test_infer_steps_do_not_regress(task):
    run("infer", "--out", task["out"])
    means = [float(r["dice"]) for r in read_csv(task["out"] / "infer_steps.csv") if r["pair"] == "mean"]
    assert all(b >= a - 0.5 for a, b in zip(means, means[1:])), means
