"""Patch-based training loop.

Each epoch is split into subepochs.  A subepoch draws a fresh set of
sub-volumes, steps RMSprop-with-momentum once per batch and logs the mean
Dice over CSF/GM/WM of the predicted target cores.  Each epoch ends with full
tiled inference on the validation subject and a checkpoint.

All randomness is keyed by position: sampling uses ``Rng(seed, "sample",
epoch, subepoch)``, dropout uses ``Rng(seed, "dropout", epoch, subepoch,
batch)``.  Resuming therefore only needs the parameters, batch-norm
statistics, optimizer accumulators and progress counters stored in the
checkpoint.
"""
import csv
import io
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import infer, metrics
from .errors import InvalidSpec, NoVoxelsOfClass, NonFiniteGradient, SpecMismatch
from .netbuild import N_CLASSES, NetworkSpec, build
from .rng import Rng
from .volio import Checkpoint, Subject, atomic_write, save_checkpoint

LOG_COLUMNS = ("epoch", "subepoch", "lr", "loss", "dc_csf", "dc_gm", "dc_wm", "dc_mean", "phase")
MAX_NONFINITE = 3


@dataclass
class TrainConfig:
    epochs: int = 30
    subepochs: int = 20
    samples: int = 1000             # per subepoch
    batch: int = 5
    lr: float = 0.001
    lr_halve_start: int = 10
    lr_halve_every: int = 5
    momentum: float = 0.6
    rms_decay: float = 0.9
    rms_eps: float = 1e-4
    edge: int = 27
    seed: int = 0
    balanced: bool = True
    dropout_rate: float = 0.5
    val_core: int = infer.CORE
    conv_method: str = None

    def validate(self, shrink=18):
        if self.samples % self.batch:
            raise InvalidSpec(f"samples per subepoch ({self.samples}) not divisible "
                              f"by batch size ({self.batch})")
        if self.edge % 2 == 0 or self.edge < shrink + 1:
            raise InvalidSpec(f"sub-volume edge must be odd and >= {shrink + 1}, got {self.edge}")
        if min(self.epochs, self.subepochs, self.samples, self.batch) < 1:
            raise InvalidSpec("epochs, subepochs, samples and batch must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidSpec("dropout rate must lie in [0, 1)")


def lr_schedule(epoch, base=0.001, start=10, every=5):
    """Learning rate for a 1-based epoch: constant, then halved every ``every``
    epochs beginning at ``start``."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if epoch < start:
        return base
    return base / 2.0 ** (1 + (epoch - start) // every)


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    cache: dict
    velocity: dict

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def as_dict(self):
        return {"cache": self.cache, "velocity": self.velocity}


def rmsprop_step(params, grads, state: OptimizerState, lr, momentum=0.6, decay=0.9, eps=1e-4):
    """In-place RMSprop with classical momentum.

    Raises NonFiniteGradient without touching anything if any gradient is
    not finite.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        c = state.cache[k]
        c *= decay
        c += (1.0 - decay) * g * g
        v = state.velocity[k]
        v *= momentum
        v -= lr * g / np.sqrt(c + eps)
        p += v
    return params, state


# -- sampling -----------------------------------------------------------------

@dataclass
class Prepared:
    """A subject ready for sampling: standardised, padded, class indices cached."""
    id: str
    padded: np.ndarray          # [M, D+2h, H+2h, W+2h]
    padded_labels: np.ndarray   # uint8, same padding
    dims: tuple
    half: int
    class_index: list           # flat voxel indices per class
    mask_index: np.ndarray


def prepare(subject: Subject, edge=27) -> Prepared:
    if subject.label is None:
        raise NoVoxelsOfClass(f"subject {subject.id} has no labels")
    h = edge // 2
    x = infer.standardize(subject)
    lab = subject.label.data.astype(np.uint8)
    mask = subject.mask if subject.mask is not None else lab > 0
    flat = lab.ravel()
    return Prepared(subject.id,
                    np.pad(x, [(0, 0)] + [(h, h)] * 3),
                    np.pad(lab, h),
                    subject.dims, h,
                    [np.flatnonzero(flat == k) for k in range(N_CLASSES)],
                    np.flatnonzero(mask.ravel()))


@dataclass
class SampleSet:
    images: np.ndarray          # [n, M, e, e, e] float32
    targets: np.ndarray         # [n, c, c, c] uint8
    centers: np.ndarray         # [n, 3] voxel coordinates
    subjects: np.ndarray        # [n] subject index
    classes: np.ndarray         # [n] drawn class, -1 for mask-uniform draws
    fallbacks: int = 0


def sample_subvolumes(subjects, n, edge, rng: Rng, balanced=True, shrink=18) -> SampleSet:
    """Draw ``n`` training sub-volumes of edge ``edge``.

    ``subjects`` are :class:`Prepared` (padded by at least ``edge // 2``).
    Balanced draws pick a class uniformly, then a voxel of that class; a
    subject lacking the class falls back to a mask-uniform draw.
    """
    core = edge - shrink
    if core < 1:
        raise InvalidSpec(f"edge {edge} leaves no target core after shrinking by {shrink}")
    subj = rng.integers(len(subjects), n)
    cls = rng.integers(N_CLASSES, n)
    u = rng.random(n)
    m = subjects[0].padded.shape[0]
    images = np.empty((n, m, edge, edge, edge), dtype=np.float32)
    targets = np.empty((n, core, core, core), dtype=np.uint8)
    centers = np.empty((n, 3), dtype=np.int64)
    drawn = np.full(n, -1, dtype=np.int64)
    fallbacks = 0
    h, hc = edge // 2, core // 2
    for i in range(n):
        s = subjects[int(subj[i])]
        pool = s.class_index[int(cls[i])] if balanced else s.mask_index
        if balanced and pool.size == 0:
            fallbacks += 1
            pool = s.mask_index
        else:
            drawn[i] = int(cls[i]) if balanced else -1
        if pool.size == 0:
            raise NoVoxelsOfClass(f"subject {s.id}: empty brain mask")
        flat = int(pool[min(int(u[i] * pool.size), pool.size - 1)])
        c = np.unravel_index(flat, s.dims)
        centers[i] = c
        # padded coordinates: voxel c sits at c + s.half
        lo = [ci + s.half - h for ci in c]
        images[i] = s.padded[:, lo[0]:lo[0] + edge, lo[1]:lo[1] + edge, lo[2]:lo[2] + edge]
        lc = [ci + s.half - hc for ci in c]
        targets[i] = s.padded_labels[lc[0]:lc[0] + core, lc[1]:lc[1] + core, lc[2]:lc[2] + core]
    return SampleSet(images, targets, centers, subj.astype(np.int64), drawn, fallbacks)


# -- logging ------------------------------------------------------------------

def _dice_from_counts(inter, pred, ref):
    out = []
    for k in range(1, N_CLASSES):
        d = pred[k] + ref[k]
        out.append(1.0 if d == 0 else 2.0 * inter[k] / d)
    return out


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    wall: list = field(default_factory=list)       # seconds per row, not persisted

    def add(self, epoch, subepoch, lr, loss, dcs, phase, seconds=0.0):
        self.rows.append({"epoch": int(epoch), "subepoch": int(subepoch), "lr": float(lr),
                          "loss": float(loss), "dc_csf": float(dcs[0]), "dc_gm": float(dcs[1]),
                          "dc_wm": float(dcs[2]), "dc_mean": float(np.mean(dcs)),
                          "phase": phase})
        self.wall.append(float(seconds))

    def phase(self, name):
        return [r for r in self.rows if r["phase"] == name]

    def train_dc(self):
        return [r["dc_mean"] for r in self.phase("train")]

    def val_dc(self):
        return [r["dc_mean"] for r in self.phase("val")]

    def lr_trace(self):
        return [r["lr"] for r in self.phase("train")]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, path):
        atomic_write(path, self.to_csv().encode("utf-8"))

    @classmethod
    def from_csv(cls, text):
        log = cls()
        rd = csv.DictReader(io.StringIO(text))
        if tuple(rd.fieldnames or ()) != LOG_COLUMNS:
            raise InvalidSpec(f"log columns {rd.fieldnames} != {list(LOG_COLUMNS)}")
        for r in rd:
            log.rows.append({"epoch": int(r["epoch"]), "subepoch": int(r["subepoch"]),
                             "lr": float(r["lr"]), "loss": float(r["loss"]),
                             "dc_csf": float(r["dc_csf"]), "dc_gm": float(r["dc_gm"]),
                             "dc_wm": float(r["dc_wm"]), "dc_mean": float(r["dc_mean"]),
                             "phase": r["phase"]})
            log.wall.append(0.0)
        return log

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_csv(fh.read())


# -- training -----------------------------------------------------------------

def validate_subject(net, subject, core, conv_method=None):
    """Full-volume mean DC and mean cross-entropy over the brain mask."""
    labels, probs = infer.segment(net, subject, core=core, conv_method=conv_method)
    ref = subject.label.data
    dcs = [metrics.dice(labels == k, ref == k) for k in range(1, N_CLASSES)]
    mask = subject.mask if subject.mask is not None else np.ones(ref.shape, bool)
    p = np.take_along_axis(probs, ref[None].astype(np.int64), axis=0)[0][mask]
    loss = float(-np.mean(np.log(np.maximum(p.astype(np.float64), 1e-12)))) if p.size else 0.0
    return dcs, loss


def _checkpoint(net, state, cfg, progress, log):
    return Checkpoint(net.spec, {k: v.copy() for k, v in net.params.items()},
                      {k: v.copy() for k, v in net.buffers.items()},
                      {"cache": {k: v.copy() for k, v in state.cache.items()},
                       "velocity": {k: v.copy() for k, v in state.velocity.items()}},
                      dict(progress), cfg.seed,
                      {"config": asdict(cfg), "log": list(log.rows)})


def _say(msg, verbose):
    if verbose:
        print(msg, file=sys.stderr, flush=True)


def train(spec: NetworkSpec, subjects_train, subject_val, config: TrainConfig = None,
          out_dir=None, resume: Checkpoint = None, stop_after_epoch=None, verbose=False):
    """Run (or continue) training; returns ``(latest Checkpoint, TrainLog)``.

    With ``out_dir`` set, ``latest.ckpt``, ``best.ckpt`` and ``train_log.csv``
    are (re)written at every epoch end.  ``stop_after_epoch`` ends the run
    early, as if interrupted after that epoch's checkpoint.
    """
    cfg = config or TrainConfig()
    if not subjects_train:
        raise NoVoxelsOfClass("at least one labelled training subject is required")
    if spec.dropout_rate != cfg.dropout_rate:
        spec = replace(spec, dropout_rate=cfg.dropout_rate)
    cfg.validate(spec.shrink)
    prepared = [prepare(s, cfg.edge) for s in subjects_train]

    if resume is not None:
        if resume.spec.to_text() != spec.to_text():
            raise SpecMismatch("resume checkpoint was written for a different network spec")
        net = resume.network()
        state = OptimizerState({k: v.copy() for k, v in resume.optimizer["cache"].items()},
                               {k: v.copy() for k, v in resume.optimizer["velocity"].items()})
        progress = dict(resume.progress)
        log = TrainLog()
        log.rows = [dict(r) for r in resume.extra.get("log", [])]
        log.wall = [0.0] * len(log.rows)
    else:
        net = build(spec, seed=cfg.seed)
        state = OptimizerState.zeros_like(net.params)
        progress = {"epochs_done": 0, "steps": 0, "skipped": 0, "nonfinite_streak": 0,
                    "best_val": -1.0, "best_epoch": 0}
        log = TrainLog()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    nb = cfg.samples // cfg.batch
    for epoch in range(progress["epochs_done"] + 1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_halve_start, cfg.lr_halve_every)
        for sub in range(1, cfg.subepochs + 1):
            t0 = time.perf_counter()
            ss = sample_subvolumes(prepared, cfg.samples, cfg.edge,
                                   Rng(cfg.seed, "sample", epoch, sub), cfg.balanced, spec.shrink)
            inter = np.zeros(N_CLASSES, np.int64)
            npred = np.zeros(N_CLASSES, np.int64)
            nref = np.zeros(N_CLASSES, np.int64)
            losses = []
            for b in range(nb):
                sl = slice(b * cfg.batch, (b + 1) * cfg.batch)
                x, y = ss.images[sl], ss.targets[sl]
                loss, logits, grads = net.train_step_grads(
                    x, y, Rng(cfg.seed, "dropout", epoch, sub, b), conv_method=cfg.conv_method)
                pred = np.argmax(logits, axis=1)
                for k in range(N_CLASSES):
                    pk, rk = pred == k, y == k
                    inter[k] += int(np.count_nonzero(pk & rk))
                    npred[k] += int(np.count_nonzero(pk))
                    nref[k] += int(np.count_nonzero(rk))
                try:
                    if not math.isfinite(loss):
                        raise NonFiniteGradient("non-finite loss")
                    rmsprop_step(net.params, grads, state, lr, cfg.momentum,
                                 cfg.rms_decay, cfg.rms_eps)
                except NonFiniteGradient as e:
                    progress["skipped"] += 1
                    progress["nonfinite_streak"] += 1
                    _say(f"epoch {epoch} subepoch {sub} batch {b}: step skipped ({e})", True)
                    if progress["nonfinite_streak"] >= MAX_NONFINITE:
                        raise NonFiniteGradient(
                            f"{MAX_NONFINITE} consecutive non-finite steps; last: {e}") from None
                    continue
                progress["nonfinite_streak"] = 0
                progress["steps"] += 1
                losses.append(loss)
            dcs = _dice_from_counts(inter, npred, nref)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            log.add(epoch, sub, lr, mean_loss, dcs, "train", time.perf_counter() - t0)
            _say(f"epoch {epoch:3d} sub {sub:3d} lr {lr:.2e} loss {mean_loss:.4f} "
                 f"dc {np.mean(dcs):.4f} ({ss.fallbacks} fallbacks)", verbose)

        t0 = time.perf_counter()
        if subject_val is not None:
            vdcs, vloss = validate_subject(net, subject_val, cfg.val_core, cfg.conv_method)
            log.add(epoch, 0, lr, vloss, vdcs, "val", time.perf_counter() - t0)
            _say(f"epoch {epoch:3d} validation dc {np.mean(vdcs):.4f}", verbose)
            vmean = float(np.mean(vdcs))
        else:
            vmean = -1.0
        progress["epochs_done"] = epoch
        improved = subject_val is not None and vmean > progress["best_val"]
        if improved:
            progress["best_val"], progress["best_epoch"] = vmean, epoch
        ckpt = _checkpoint(net, state, cfg, progress, log)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "latest.ckpt"), ckpt)
            if improved or not os.path.exists(os.path.join(out_dir, "best.ckpt")):
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), ckpt)
            log.write(os.path.join(out_dir, "train_log.csv"))
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    else:
        ckpt = _checkpoint(net, state, cfg, progress, log)
    return ckpt, log
