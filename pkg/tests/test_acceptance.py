"""Acceptance criteria 1-9.

Each test records one ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary).  Criterion 6 at full width cannot run inside its time
budget on a single CPU core; the test measures the projected cost and fails
unless ``HD3D_FULL_STUDY=1`` requests the full protocol.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from hd3d import gradcheck, metrics, ops
from hd3d.graph import forward
from hd3d.infer import plan_tiles, segment
from hd3d.netbuild import CONV_KERNELS, FULLY_KERNELS, build, init_he, plan_channels, standard_spec
from hd3d.phantom import PhantomConfig, generate
from hd3d.rng import Rng
from hd3d.study import (STUDY_TRAIN, non_decreasing_after_first_epoch, phantom_split,
                        project_runtime, run_one, run_study)
from hd3d.train import OptimizerState, TrainConfig, prepare, rmsprop_step, sample_subvolumes, train
from hd3d.volio import load_checkpoint

from test_metrics import oracle_all, random_blob

ARCHS = ("hyperdense", "baseline")
FULL_STUDY = os.environ.get("HD3D_FULL_STUDY", "") not in ("", "0")


def test_criterion_1_layer_table_conformance(criteria):
    t0 = time.perf_counter()
    problems = []
    for arch in ARCHS:
        net = build(standard_spec(arch), seed=0)
        x = Rng(1).normal(2 * 27 ** 3).reshape(1, 2, 27, 27, 27).astype(np.float32)
        names = [n for n in net.graph.outputs if n != "loss"]
        out = forward(net.graph, net.feed(x), mode="infer", outputs=names)
        streams = (1, 2) if arch == "hyperdense" else (1,)
        ladder = [out[f"conv_{l}.s{streams[0]}"].shape[2] for l in range(1, 10)]
        if ladder != [25, 23, 21, 19, 17, 15, 13, 11, 9]:
            problems.append(f"{arch} ladder {ladder}")
        for s in streams:
            kernels = [out[f"conv_{l}.s{s}"].shape[1] for l in range(1, 10)]
            if kernels != CONV_KERNELS:
                problems.append(f"{arch} stream {s} kernels {kernels}")
        tail = [out[n].shape[1:] for n in ("fully_conv_1", "fully_conv_2", "fully_conv_3",
                                          "classification")]
        if tail != [(k, 9, 9, 9) for k in FULLY_KERNELS + [4]]:
            problems.append(f"{arch} fully-conv shapes {tail}")
        if out["logits"].shape != (1, 4, 9, 9, 9):
            problems.append(f"{arch} logits {out['logits'].shape}")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 60
    criteria.record(1, ok, f"ladder 25..9, kernels 25/25/25/50/50/50/75/75/75/400/200/150/4 "
                           f"for both archs; {dt:.1f}s {'; '.join(problems)}")
    assert ok, problems


def test_criterion_2_channel_accounting(criteria):
    hd = plan_channels(standard_spec("hyperdense"))
    bl = plan_channels(standard_spec("baseline"))
    got = {"hd_s1": hd.conv_inputs(1), "hd_s2": hd.conv_inputs(2), "hd_fc1": hd.fc1_inputs,
           "bl": bl.conv_inputs(1), "bl_fc1": bl.fc1_inputs}
    want = {"hd_s1": [1, 52, 102, 152, 252, 352, 452, 602, 752],
            "hd_s2": [1, 52, 102, 152, 252, 352, 452, 602, 752], "hd_fc1": 900,
            "bl": [2, 27, 52, 77, 127, 177, 227, 302, 377], "bl_fc1": 450}
    ok = got == want
    criteria.record(2, ok, f"hyperdense {got['hd_s1']} -> {got['hd_fc1']}; "
                           f"baseline {got['bl']} -> {got['bl_fc1']}")
    assert ok, got


def test_criterion_3_gradient_checks(criteria):
    t0 = time.perf_counter()
    results = gradcheck.run("all", seed=0, n_coords=100)
    dt = time.perf_counter() - t0
    names = {r.name for r in results}
    ok = (names >= {"conv3d", "conv3d_1x1", "batchnorm", "prelu", "dropout", "softmax_xent",
                    "hyperdense3"}
          and all(r.passed and r.coords >= 100 for r in results) and dt < 300)
    worst = max(r.max_rel_err for r in results)
    criteria.record(3, ok, f"{len(results)} checks, worst rel err {worst:.2e} < 1e-6, "
                           f"min coords {min(r.coords for r in results)}; {dt:.1f}s")
    for r in results:
        print(r.line())
    assert ok


def test_criterion_4_metric_oracle(criteria):
    t0 = time.perf_counter()
    r = Rng(2024, "acceptance-metrics")
    n = dc_bad = mhd_bad = mean_bad = 0
    while n < 100:
        dims = tuple(int(v) for v in 3 + r.integers(10, 3))      # 3..12 per axis
        sp = tuple(float(v) for v in 0.5 + 1.5 * r.random(3)) if n % 3 else (1.0, 1.0, 1.0)
        a = random_blob(r, dims, 0.2 + 0.6 * r.random(1)[0])
        b = random_blob(r, dims, 0.2 + 0.6 * r.random(1)[0])
        if not a.any() or not b.any():
            continue
        n += 1
        dc_oracle = 2 * int((a & b).sum()) / (int(a.sum()) + int(b.sum()))
        dc_bad += metrics.dice(a, b) != dc_oracle
        h95, hdj, s = oracle_all(a, b, sp)
        mhd_bad += metrics.mhd(a, b, "percentile95", sp) != h95
        mean_bad += abs(metrics.mhd(a, b, "dubuisson_jain", sp) - hdj) > 1e-9
        mean_bad += abs(metrics.asd(a, b, sp) - s) > 1e-9
    dt = time.perf_counter() - t0
    ok = dc_bad == mhd_bad == mean_bad == 0 and dt < 120
    criteria.record(4, ok, f"100 pairs: DC mismatches {dc_bad}, MHD95 mismatches {mhd_bad}, "
                           f"mean-type mismatches {mean_bad}; {dt:.1f}s")
    assert ok


def test_criterion_5_he_init(criteria):
    rows = []
    for fan_in in (27, 52 * 27, 900):
        w = init_he(fan_in, (100_000,), Rng(fan_in, "he-acceptance"), dtype=np.float64)
        target = math.sqrt(2.0 / fan_in)
        rows.append((fan_in, float(w.std()) / target - 1, abs(float(w.mean())) / target))
    # the built network draws from the same rule
    net = build(standard_spec("hyperdense"), seed=0)
    for name, fan_in in (("conv_5.s1.weight", 252 * 27), ("conv_9.s2.weight", 752 * 27),
                         ("fully_conv_2.weight", 400)):
        w = net.params[name].astype(np.float64)
        target = math.sqrt(2.0 / fan_in)
        rows.append((name, float(w.std()) / target - 1, abs(float(w.mean())) / target))
    ok = all(abs(dev) < 0.02 and m < 0.02 for _, dev, m in rows)
    criteria.record(5, ok, "std/sqrt(2/n) - 1: " +
                    ", ".join(f"{k}: {dev:+.4f}" for k, dev, _ in rows))
    assert ok


def _study_verdict(res, subepochs):
    hd = res.of("hyperdense")
    a = hd[0].mean_test_dc >= 0.85
    mono = [non_decreasing_after_first_epoch(r.train_dc, subepochs)[0] for r in hd]
    c = res.mean_test_dc("hyperdense") >= res.mean_test_dc("baseline") - 0.01
    return a, all(mono), c


def test_criterion_6_phantom_study(criteria):
    t0 = time.perf_counter()
    proj = project_runtime(STUDY_TRAIN, width=1.0, seeds=3)
    if not FULL_STUDY:
        ok = criteria.record(6, False,
                             f"projected full protocol {proj / 3600:.1f} h CPU on this machine "
                             f"> 60 min target; (a)-(c) not evaluated "
                             f"(set HD3D_FULL_STUDY=1 to run it)")
        assert ok, f"projected runtime {proj:.0f}s exceeds the 3600s target"
    res = run_study(seeds=(0, 1, 2), width=1.0, config=STUDY_TRAIN, verbose=True)
    a, b, c = _study_verdict(res, STUDY_TRAIN.subepochs)
    dt = time.perf_counter() - t0
    ok = a and b and c and dt < 3600
    criteria.record(6, ok, f"(a) hyperdense DC {res.of('hyperdense')[0].mean_test_dc:.4f} "
                           f"{'ok' if a else 'low'}; (b) monotone {b}; (c) hyperdense "
                           f"{res.mean_test_dc('hyperdense'):.4f} vs baseline "
                           f"{res.mean_test_dc('baseline'):.4f}; {dt / 60:.1f} min")
    assert ok


REDUCED = replace(STUDY_TRAIN, samples=20, val_core=37)


@pytest.mark.slow
def test_criterion_6_reduced_scale_run(criteria):
    """Same pipeline at 1/10 width and 1/10 samples per subepoch, one seed.

    Informational: reported beside criterion 6, not a substitute for it.
    """
    data = phantom_split()
    runs = [run_one(arch, 0, data, REDUCED, width=0.1, test_core=37) for arch in ARCHS]
    hd, bl = runs
    mono, _ = non_decreasing_after_first_epoch(hd.train_dc, REDUCED.subepochs)
    criteria.record("6r", True,
                    f"(informational, width 0.1, 20 samples/subepoch, seed 0) hyperdense test "
                    f"DC {np.round(hd.test_dc, 3).tolist()} mean {hd.mean_test_dc:.3f} "
                    f"({hd.seconds:.0f}s); baseline {np.round(bl.test_dc, 3).tolist()} mean "
                    f"{bl.mean_test_dc:.3f} ({bl.seconds:.0f}s); hyperdense MA monotone {mono}")
    for r in runs:
        assert all(0.0 <= d <= 1.0 for d in r.test_dc)
        assert r.mean_test_dc > 0.5          # far above an untrained net


OVERFIT_WIDTH = 0.1
OVERFIT_BATCH = 2


def _batch_xent(net, batch):
    """Deterministic (infer-mode) mean cross-entropy of ``net`` on ``batch``."""
    p = ops.softmax(net.logits(batch.images).astype(np.float64))
    t = batch.targets[:, None].astype(np.int64)
    return float(-np.mean(np.log(np.take_along_axis(p, t, axis=1))))


def _overfit(arch, batch):
    net = build(standard_spec(arch, width=OVERFIT_WIDTH), seed=0)
    state = OptimizerState.zeros_like(net.params)
    cfg = TrainConfig()
    losses = []
    for i in range(200):
        loss, _, g = net.train_step_grads(batch.images, batch.targets, Rng(0, "overfit", i))
        losses.append(loss)
        rmsprop_step(net.params, g, state, cfg.lr, cfg.momentum, cfg.rms_decay, cfg.rms_eps)
    return losses[0], losses[-1], _batch_xent(net, batch)


def test_criterion_7_single_batch_overfit(criteria):
    t0 = time.perf_counter()
    subs = [generate(PhantomConfig(dims=(32, 32, 32), seed=s)) for s in range(2)]
    batch = sample_subvolumes([prepare(s, 27) for s in subs], OVERFIT_BATCH, 27,
                              Rng(0, "overfit-batch"))
    res = {arch: _overfit(arch, batch) for arch in ARCHS}
    dt = time.perf_counter() - t0
    ln4 = math.log(4)
    overfit_ok = all(f < 0.05 for _, _, f in res.values())
    init_ok = all(abs(i - ln4) <= 0.15 for i, _, _ in res.values())
    ok = overfit_ok and init_ok and dt < 300
    criteria.record(7, ok, "; ".join(
        f"{a}: initial {i:.3f} (ln4 {ln4:.3f}), after 200 steps {f:.4f} "
        f"(train-mode with dropout {tr:.4f})" for a, (i, tr, f) in res.items()) +
        f"; width {OVERFIT_WIDTH}, batch {OVERFIT_BATCH}; {dt:.0f}s")
    assert overfit_ok, res
    assert init_ok, res
    assert dt < 300


DET = TrainConfig(epochs=2, subepochs=2, samples=10, batch=5)


def test_criterion_8_determinism_and_resume(criteria, tmp_path):
    t0 = time.perf_counter()
    subs = [generate(PhantomConfig(dims=(32, 32, 32), seed=s)) for s in range(3)]
    tr, val = subs[:2], subs[2]
    detail, ok = [], True
    for arch in ARCHS:
        spec = standard_spec(arch, width=0.1)
        a, la = train(spec, tr, val, DET)
        b, lb = train(spec, tr, val, DET)
        train(spec, tr, val, DET, out_dir=tmp_path / arch, stop_after_epoch=1)
        c, lc = train(spec, tr, val, DET, resume=load_checkpoint(tmp_path / arch / "latest.ckpt"))
        same = all(np.array_equal(a.params[k], b.params[k]) for k in a.params) and \
            la.to_csv() == lb.to_csv()
        resumed = all(np.array_equal(a.params[k], c.params[k]) for k in a.params) and \
            all(np.array_equal(a.buffers[k], c.buffers[k]) for k in a.buffers) and \
            la.to_csv() == lc.to_csv()
        ok &= same and resumed
        detail.append(f"{arch}: repeat identical {same}, resume identical {resumed}")
    dt = time.perf_counter() - t0
    ok &= dt < 600
    criteria.record(8, ok, "; ".join(detail) + f"; {dt:.0f}s")
    assert ok


def test_criterion_9_tiling_equivalence(criteria):
    t0 = time.perf_counter()
    subj = generate(PhantomConfig(dims=(18, 17, 20), seed=4, semi_axes=(0.36, 0.36, 0.36)))
    detail, ok = [], True
    for arch in ARCHS:
        net = build(standard_spec(arch), seed=2)
        lab1, p1 = segment(net, subj, core=20)
        labt, pt = segment(net, subj, core=9)
        n_tiles = len(plan_tiles(subj.dims, 9).tiles)
        exact = np.array_equal(p1, pt) and np.array_equal(lab1, labt)
        ok &= exact
        detail.append(f"{arch}: 1 window vs {n_tiles} tiles exact {exact}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    criteria.record(9, ok, "; ".join(detail) + f" (full width); {dt:.0f}s")
    assert ok
