"""Acceptance criteria 1-12, each checked at its stated tolerance.

The heavy criteria (7, 9, 10) share one desk-scale pipeline run. Set
``SPHG_REUSE_RUNS=1`` to reuse a finished run directory from an earlier
session instead of retraining (the default retrains from scratch).
"""

import json
import math
import os
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from sphg import tensor as T
from sphg.checkpoint import deserialize_checkpoint, load_checkpoint, serialize_checkpoint
from sphg.config import Config
from sphg.losses import focal_loss
from sphg.network import NetworkConfig, build_network
from sphg.plots import export_run_plots
from sphg.pipeline import evaluate, match_slots, run_pipeline
from sphg.prune import (build_prune_groups, channel_contribution, channel_spaces, l1_regularizer,
                        prune_step, zero_out_group)
from sphg.select import SelectModule, he_kernel, cen_regularizer, commit_selection, select_forward
from sphg.slots import infer_slots
from sphg.synth import (Dataset, SceneParams, generate_dataset, make_scenes, render_heatmap_targets,
                        split_indices)

from conftest import record_criterion

RUNS = Path(os.environ.get("SPHG_ACCEPTANCE_DIR", Path(__file__).resolve().parent.parent / "acceptance_runs"))
REUSE = os.environ.get("SPHG_REUSE_RUNS") == "1"


def fresh_dir(path):
    path = Path(path)
    if path.exists() and not REUSE:
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- shared desk-scale run ---------------------------------------------------------------
@pytest.fixture(scope="session")
def desk_run():
    """Full default schedule on 800/180 synthetic 64x64 scenes (criteria 7, 9, 10)."""
    data = RUNS / "desk_data"
    out = RUNS / "desk_run"
    cfg = Config({"data.dir": str(data)})
    if not (REUSE and (data / "split.txt").exists()):
        fresh_dir(data)
        generate_dataset(data, cfg["data.num_scenes"], cfg["seed"], cfg.scene_params())
    fresh_dir(out)
    timing = out / "wall_time.json"
    t0 = time.perf_counter()
    run = run_pipeline(cfg, out)
    if not (REUSE and timing.exists()):
        timing.write_text(json.dumps({"seconds": time.perf_counter() - t0}))
    return cfg, out, run


# -- 1 ---------------------------------------------------------------------------------------
def test_c01_gradient_correctness():
    rng = np.random.default_rng(0)
    t64 = lambda *s: T.Tensor(rng.standard_normal(s))
    away = lambda *s: T.Tensor(rng.choice([-1, 1], s) * rng.uniform(0.2, 1.5, s))
    checks = {}
    t0 = time.perf_counter()
    for k, d in [(3, 1), (3, 2), (3, 3), (5, 1)]:
        checks[f"conv2d k{k} d{d}"] = T.finite_diff_check(
            lambda x, w, b, d=d: T.conv2d(x, w, b, dilation=d), [t64(1, 2, 7, 7), t64(2, 2, k, k), t64(2)])
    checks["maxpool2x2"] = T.finite_diff_check(T.maxpool2x2, [t64(1, 2, 6, 6)])
    checks["upsample"] = T.finite_diff_check(T.upsample_nearest2x, [t64(1, 2, 3, 3)])
    checks["dense"] = T.finite_diff_check(T.dense, [t64(3, 4), t64(5, 4), t64(5)])
    checks["relu"] = T.finite_diff_check(T.relu, [away(4, 5)])
    checks["sigmoid"] = T.finite_diff_check(T.sigmoid, [t64(4, 5)])
    checks["softmax"] = T.finite_diff_check(T.softmax_lastdim, [t64(3, 4)])
    y = rng.uniform(0, 1, (1, 1, 5, 5))
    y[0, 0, 2, 2] = 1.0
    checks["focal loss"] = T.finite_diff_check(lambda p: focal_loss(p, y),
                                               [T.Tensor(rng.uniform(0.05, 0.95, y.shape))])

    mod = SelectModule.build(2, 2, [(3, 1), (3, 2), (3, 3)], rng, dtype=np.float64, name="S")
    for p in mod.cen_parameters().values():
        p.data = rng.standard_normal(p.shape) * 0.5
    cen_names = [n.split(".")[-1] for n in mod.cen_parameters()]
    cen_params = list(mod.cen.values())
    cand_w = [c.weight for c in mod.candidates]

    def lcen(*ps):
        mod.cen.update(dict(zip(cen_names, ps[:4])))
        for c, w in zip(mod.candidates, ps[4:]):
            c.weight = w
        return cen_regularizer([mod.cen_forward()])

    checks["L_CEN (through CEN and weight statistics)"] = T.finite_diff_check(lcen, cen_params + cand_w)
    x = t64(1, 2, 6, 6)

    def mixture(*ws):
        for c, w in zip(mod.candidates, ws):
            c.weight = w
        return mod.forward(x)

    checks["select mixture"] = T.finite_diff_check(mixture, [c.weight for c in mod.candidates])

    net = build_network(NetworkConfig(input_size=8, depth=1, base_channels=2), dtype=np.float64)
    for l in net.sp_layers():
        l.module.commit_to(0)
    kern = net.sp_layers()[0].kernels[0]
    kern.weight.data = rng.choice([-1, 1], kern.weight.shape) * rng.uniform(0.1, 1, kern.weight.shape)

    def l1(w):
        kern.weight = w
        return l1_regularizer(net)

    checks["L1"] = T.finite_diff_check(l1, [kern.weight])
    elapsed = time.perf_counter() - t0
    worst = max(checks.values())
    ok = worst < 1e-4 and elapsed < 60
    record_criterion(1, "finite-difference gradients", ok,
                     f"max rel err {worst:.2e} over {len(checks)} ops, {elapsed:.1f}s")
    assert worst < 1e-4, {k: v for k, v in checks.items() if v >= 1e-4}
    assert elapsed < 60


# -- 2 ---------------------------------------------------------------------------------------
def test_c02_cen_regularizer_analytics():
    one_hot = cen_regularizer([T.Tensor(np.array([0.0, 1.0, 0.0]))]).item()
    uniform_err = max(abs(cen_regularizer([T.Tensor(np.full(K, 1.0 / K))]).item() - math.log(K))
                      for K in (2, 3, 4))
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((10_000, 4)) * rng.uniform(0.1, 20, (10_000, 1))
    alphas = T.softmax_lastdim(T.Tensor(logits)).data
    vals = np.array([cen_regularizer([T.Tensor(a)]).item() for a in alphas])
    ok = one_hot == 0.0 and uniform_err < 1e-9 and vals.min() >= 0
    record_criterion(2, "L_CEN analytics", ok,
                     f"one-hot {one_hot}, |uniform - log K| {uniform_err:.1e}, min over 1e4 {vals.min():.2e}")
    assert one_hot == 0.0
    assert uniform_err < 1e-9
    assert vals.min() >= 0


# -- 3 ---------------------------------------------------------------------------------------
def test_c03_contribution_analytics():
    net = build_network(NetworkConfig(input_size=32, depth=2, base_channels=8), dtype=np.float64,
                        rng=np.random.default_rng(3))
    for l in net.sp_layers():
        l.module.commit_to(1)
    sum_err = max(abs(channel_contribution(l).sum() - 1.0) for l in net.sp_layers())
    kern = he_kernel(np.random.default_rng(0), 1, 2, 1, dtype=np.float64)
    kern.weight.data = np.array([0.0, math.log(2.0)]).reshape(2, 1, 1, 1)
    got = channel_contribution(SimpleNamespace(kernels=[kern]))
    two_err = np.abs(got - [1 / 3, 2 / 3]).max()
    ok = sum_err < 1e-9 and two_err < 1e-12
    record_criterion(3, "channel contribution analytics", ok,
                     f"sum err {sum_err:.1e}, [0, ln 2] -> {got.round(15).tolist()} err {two_err:.1e}")
    assert sum_err < 1e-9
    assert two_err < 1e-12


# -- 4 ---------------------------------------------------------------------------------------
def test_c04_commit_equivalence():
    rng = np.random.default_rng(4)
    mod = SelectModule.build(3, 4, [(3, 1), (3, 2), (3, 3)], rng, dtype=np.float32, name="E")
    mod.record_alpha(np.array([0.2, 0.5, 0.3]))
    winner = commit_selection(mod)
    k = mod.kernel
    identical = 0
    for _ in range(100):
        x = T.Tensor(rng.standard_normal((1, 3, 12, 12)).astype(np.float32))
        a = select_forward(mod, x).data
        b = T.conv2d(x, k.weight, k.bias, dilation=k.dilation).data
        identical += int(np.array_equal(a, b))
    record_criterion(4, "commit equivalence", identical == 100,
                     f"winner {winner} (dilation {k.dilation}), {identical}/100 bit-identical")
    assert identical == 100


# -- 5 ---------------------------------------------------------------------------------------
def test_c05_prune_equivalence():
    rng = np.random.default_rng(5)
    net = build_network(NetworkConfig(input_size=32, depth=2, base_channels=6), dtype=np.float64,
                        rng=np.random.default_rng(6))
    for l in net.sp_layers():
        l.module.commit_to(0)
    for l in net.layers:
        for kern in l.kernels:
            kern.bias.data = rng.standard_normal(kern.bias.shape) * 0.1
    spaces = channel_spaces(net)
    groups = build_prune_groups(net)
    skip = [g for g in groups if len(g.members) > 1][:3]
    plain = [g for g in groups if len(g.members) == 1][:3]
    chosen = skip + plain
    for g in chosen:
        zero_out_group(net, spaces[g.space], g.channel)
    xs = [rng.random((1, 1, 32, 32)) for _ in range(100)]
    def outputs(x):
        return np.concatenate([t.data for t in net.forward(x)[0].as_tuple()])

    before = [outputs(x) for x in xs]
    prune_step(net, groups=chosen, layer_threshold=0.0, global_count=len(chosen))
    after = [outputs(x) for x in xs]
    worst = max(np.abs(a - b).max() for a, b in zip(after, before))
    ok = worst <= 1e-9 and len(skip) == 3
    record_criterion(5, "zero-then-prune equivalence", ok,
                     f"{len(skip)} skip groups + {len(plain)} plain groups, max |diff| {worst:.1e} on 100 inputs")
    assert len(skip) == 3
    assert worst <= 1e-9


# -- 6 ---------------------------------------------------------------------------------------
def test_c06_closure_property():
    cfg = Config()
    scenes = make_scenes(200, seed=6, params=SceneParams.clean())
    tp = fp = fn = 0
    for _, gt in scenes:
        t = render_heatmap_targets(gt, corner_sigma=cfg["data.corner_sigma"], line_sigma=cfg["data.line_sigma"])
        _, slots = infer_slots(t.corners, t.entry_lines, t.separating_lines, cfg.slot_config())
        a, b, c = match_slots(gt.slots, slots)
        tp, fp, fn = tp + a, fp + b, fn + c
    total = tp + fn
    ok = fn == 0 and fp == 0
    record_criterion(6, "closure property", ok, f"{tp}/{total} slots recovered, {fp} false positives, 200 scenes")
    assert fn == 0
    assert fp == 0


# -- 7 ---------------------------------------------------------------------------------------
def test_c07_end_to_end_desk_training(desk_run):
    cfg, out, run = desk_run
    val = run.val
    net = load_checkpoint(out / "final.ckpt").net
    m = evaluate(net, val, cfg)
    seconds = json.loads((out / "wall_time.json").read_text())["seconds"]
    ok = m["precision"] >= 0.95 and m["recall"] >= 0.93 and m["err_px"] <= 1.0 and seconds < 7200
    record_criterion(7, "desk-scale end-to-end", ok,
                     f"train {len(run.train)} / val {len(val)}, P {m['precision']:.4f} R {m['recall']:.4f} "
                     f"err {m['err_px']:.3f} px, {seconds / 60:.1f} min, {net.num_params()} params")
    assert (len(run.train), len(val)) == (800, 180)
    assert m["precision"] >= 0.95
    assert m["recall"] >= 0.93
    assert m["err_px"] <= 1.0
    assert seconds < 7200


# -- 8 ---------------------------------------------------------------------------------------
SEL_DATA_SEED = 80


@pytest.fixture(scope="session")
def mixed_scale_data():
    cfg = Config({"scene.width_min": 13.0, "scene.width_max": 30.0})
    scenes = make_scenes(300, seed=SEL_DATA_SEED, params=cfg.scene_params())
    train_idx, val_idx = split_indices(300, SEL_DATA_SEED)
    return (Dataset.from_scenes([scenes[i] for i in train_idx]),
            Dataset.from_scenes([scenes[i] for i in val_idx]))


def _selection_runs(data, seed):
    common = {"seed": seed, "scene.width_min": 13.0, "scene.width_max": 30.0,
              "schedule.prune_epochs": 0, "schedule.finetune_epochs": 6, "schedule.tiers": (1.0,),
              "schedule.deploy_tier": 1.0}
    n_sp = len(build_network().sp_layers())
    selected = Config(dict(common, **{"schedule.warmup_epochs": 3, "schedule.cen_epochs": 4,
                                      "select.epochs_per_layer": 1}))
    fixed = Config(dict(common, **{"select.enabled": False, "schedule.warmup_epochs": 3 + n_sp,
                                   "schedule.cen_epochs": 4}))
    out = {}
    for name, cfg in (("selected", selected), ("fixed3x3", fixed)):
        d = fresh_dir(RUNS / f"selection_seed{seed}_{name}")
        run_pipeline(cfg, d, *data)
        net = load_checkpoint(d / "final.ckpt").net
        out[name] = evaluate(net, data[1], cfg, curve=True)["miss_rate_at_fppi"]
    return out


def test_c08_selection_benefit(mixed_scale_data):
    results = {seed: _selection_runs(mixed_scale_data, seed) for seed in (0, 1, 2)}
    wins = sum(r["selected"] <= r["fixed3x3"] for r in results.values())
    detail = ", ".join(f"seed {s}: {r['selected']:.3f} vs {r['fixed3x3']:.3f}" for s, r in results.items())
    record_criterion(8, "selection benefit (miss rate at 0.1 FPPI, selected vs fixed 3x3)", wins >= 2,
                     f"{wins}/3 seeds; {detail}")
    assert wins >= 2


# -- 9 ---------------------------------------------------------------------------------------
def test_c09_pruning_recovery(desk_run):
    cfg, out, run = desk_run
    prec = {}
    params = {}
    for tier in ("1.00", "0.60"):
        net = load_checkpoint(out / f"best_tier_{tier}.ckpt").net
        prec[tier] = evaluate(net, run.val, cfg)["precision"]
        params[tier] = net.num_params()
    ratio = params["0.60"] / params["1.00"]
    gap = prec["1.00"] - prec["0.60"]
    ok = gap <= 0.02
    record_criterion(9, "pruning recovery at the 60% tier", ok,
                     f"baseline P {prec['1.00']:.4f}, 60% tier P {prec['0.60']:.4f} ({ratio:.3f} of params), "
                     f"gap {gap * 100:+.2f} pp")
    assert abs(ratio - 0.6) <= 0.02
    assert gap <= 0.02


# -- 10 --------------------------------------------------------------------------------------
def test_c10_pruning_degradation_shape(desk_run):
    _, out, _ = desk_run
    rows = [l.split("\t") for l in (out / "prune_curve.tsv").read_text().splitlines()[1:]]
    removed = np.array([float(r[1]) for r in rows])
    acc = np.array([float(r[3]) for r in rows])

    def at(level):
        idx = np.nonzero(removed >= level - 1e-9)[0]
        return (removed[idx[0]], acc[idx[0]]) if len(idx) else (None, None)

    r10, a10 = at(0.10)
    r70, a70 = at(0.70)
    artifacts = export_run_plots(out, out / "plots")
    ok = a10 is not None and a70 is not None and a70 < a10
    record_criterion(10, "pruning degradation shape", ok,
                     f"accuracy {a10} at {r10} removed vs {a70} at {r70} removed; {len(rows)} curve points "
                     f"in {artifacts[0].relative_to(out)}")
    assert a10 is not None and a70 is not None
    assert a70 < a10


# -- 11 --------------------------------------------------------------------------------------
def test_c11_determinism(desk_run):
    _, desk_out, _ = desk_run
    cfg = Config({"schedule.warmup_epochs": 1, "schedule.cen_epochs": 1, "select.epochs_per_layer": 1,
                  "schedule.prune_epochs": 3, "schedule.finetune_epochs": 1, "schedule.tiers": (1.0, 0.6),
                  "prune.global_count": 8})
    scenes = make_scenes(48, seed=11, params=cfg.scene_params())
    train, val = Dataset.from_scenes(scenes[:40]), Dataset.from_scenes(scenes[40:])
    logs = []
    for name in ("a", "b"):
        d = fresh_dir(RUNS / f"determinism_{name}")
        run_pipeline(cfg, d, train, val, single_threaded=True)
        logs.append({f: (d / f).read_bytes() for f in ("metrics.tsv", "prune_log.txt", "selection.txt",
                                                       "prune_curve.tsv", "final.ckpt")})
    same_logs = logs[0] == logs[1]
    ckpts = sorted(desk_out.glob("*.ckpt"))
    exact = sum(serialize_checkpoint(deserialize_checkpoint(p.read_bytes())) == p.read_bytes() for p in ckpts)
    ok = same_logs and exact == len(ckpts) and len(ckpts) > 0
    record_criterion(11, "determinism and checkpoint round-trip", ok,
                     f"two single-threaded runs identical: {same_logs}; {exact}/{len(ckpts)} checkpoints "
                     f"re-serialize bit-exactly")
    assert same_logs
    assert exact == len(ckpts) > 0


# -- 12 --------------------------------------------------------------------------------------
def test_c12_reference_constants():
    cfg = Config(preset="full")
    expected = {
        "network.input_size": 224, "network.base_channels": 64, "loss.lambda_sl": 0.1,
        "loss.lambda_l1": 0.05, "optim.lr": 1e-3, "schedule.warmup_epochs": 5, "schedule.cen_epochs": 10,
        "select.epochs_per_layer": 2, "schedule.prune_epochs": 100, "schedule.finetune_epochs": 15,
        "prune.layer_threshold": 0.01, "prune.global_count": 5, "network.large_feature_size": 28,
        "eval.delta_px": 1.5,
    }
    wrong = {k: (cfg[k], v) for k, v in expected.items() if cfg[k] != v}
    record_criterion(12, "reference constants in presets", not wrong,
                     f"{len(expected) - len(wrong)}/{len(expected)} match" + (f"; mismatched {wrong}" if wrong else ""))
    assert not wrong
