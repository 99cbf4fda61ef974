"""Phantom comparison study: hyperdense vs baseline on synthetic subjects.

Protocol: 3 training subjects, 1 validation, 1 test, all 64^3 with the default
phantom contrast; both architectures trained with the same ``TrainConfig``
for each seed; test Dice per class from tiled inference on the test subject.
"""
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .infer import segment
from .netbuild import build, standard_spec
from .phantom import PhantomConfig, generate
from .rng import Rng
from .train import TrainConfig, prepare, sample_subvolumes, train

STUDY_TRAIN = TrainConfig(epochs=10, subepochs=5, samples=200, batch=5)


@dataclass
class RunResult:
    arch: str
    seed: int
    test_dc: list               # CSF, GM, WM
    train_dc: list              # per subepoch
    val_dc: list
    seconds: float

    @property
    def mean_test_dc(self):
        return float(np.mean(self.test_dc))


@dataclass
class StudyResult:
    runs: list = field(default_factory=list)

    def of(self, arch):
        return [r for r in self.runs if r.arch == arch]

    def mean_test_dc(self, arch):
        return float(np.mean([r.mean_test_dc for r in self.of(arch)]))


def phantom_split(dims=(64, 64, 64), data_seed=0):
    subs = [generate(PhantomConfig(dims=dims, seed=data_seed * 1000 + i), f"phantom{i}")
            for i in range(5)]
    return subs[:3], subs[3], subs[4]


def moving_average(x, n=5):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[n:] - c[:-n]) / n


def non_decreasing_after_first_epoch(train_dc, subepochs, n=5):
    """Moving average (window ``n``) over subepochs from epoch 2 on never drops."""
    ma = moving_average(train_dc[subepochs:], n)
    return bool(np.all(np.diff(ma) >= 0)), ma


def run_one(arch, seed, data, config=STUDY_TRAIN, width=1.0, test_core=17, validate=True):
    tr, val, test = data
    cfg = replace(config, seed=seed)
    t0 = time.perf_counter()
    ckpt, log = train(standard_spec(arch, width=width), tr, val if validate else None, cfg)
    net = ckpt.network()
    labels, _ = segment(net, test, core=test_core, conv_method=cfg.conv_method)
    ref = test.label.data
    dcs = [metrics.dice(labels == k, ref == k) for k in (1, 2, 3)]
    return RunResult(arch, seed, dcs, log.train_dc(), log.val_dc(), time.perf_counter() - t0)


def run_study(seeds=(0, 1, 2), width=1.0, config=STUDY_TRAIN, dims=(64, 64, 64),
              archs=("hyperdense", "baseline"), test_core=17, validate=True, verbose=False):
    data = phantom_split(dims)
    res = StudyResult()
    for seed in seeds:
        for arch in archs:
            r = run_one(arch, seed, data, config, width, test_core, validate)
            res.runs.append(r)
            if verbose:
                print(f"{arch:10s} seed {seed}: test DC {np.round(r.test_dc, 4).tolist()} "
                      f"mean {r.mean_test_dc:.4f} ({r.seconds:.0f}s)", flush=True)
    return res


def project_runtime(config=STUDY_TRAIN, width=1.0, seeds=3, dims=(64, 64, 64), val_core=17):
    """Seconds the full study would take, extrapolated from one timed step and tile
    per architecture."""
    total = 0.0
    tr, _, _ = phantom_split(dims)
    prepared = [prepare(s, config.edge) for s in tr]
    steps = config.epochs * config.subepochs * (config.samples // config.batch)
    from .infer import plan_tiles
    n_tiles = len(plan_tiles(dims, val_core).tiles)
    w = val_core + 18
    for arch in ("hyperdense", "baseline"):
        net = build(standard_spec(arch, width=width), seed=0)
        ss = sample_subvolumes(prepared, config.batch, config.edge, Rng(0, "probe"))
        net.train_step_grads(ss.images, ss.targets, Rng(0, "probe-dropout"))  # warm-up
        t = time.perf_counter()
        net.train_step_grads(ss.images, ss.targets, Rng(0, "probe-dropout"))
        step = time.perf_counter() - t
        t = time.perf_counter()
        net.logits(np.zeros((1, 2, w, w, w), np.float32))
        tile = time.perf_counter() - t
        # validation each epoch plus one test segmentation
        total += seeds * (steps * step + (config.epochs + 1) * n_tiles * tile)
    return total
