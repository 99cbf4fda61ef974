"""Tiled full-volume inference.

The volume is zero-padded by the receptive-field margin and covered by
windows of ``core + 2 * margin`` voxels whose ``core``-sized predictions are
laid on a ``core``-stride grid.  When the last grid cell overruns the volume
the computed core is shifted inward to end at the border and only its
not-yet-written part is stored, so written regions never overlap.
"""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import SpecMismatch
from .netbuild import MODALITIES, Network
from .volio import Checkpoint, Subject

CORE = 17
MARGIN = 9


@dataclass
class Tile:
    in_origin: tuple        # window origin in padded coordinates
    out_origin: tuple       # first written voxel, volume coordinates
    extent: tuple           # written size
    offset: tuple           # written region's offset inside the computed core


@dataclass
class TilePlan:
    dims: tuple
    core: int = CORE
    margin: int = MARGIN
    tiles: list = field(default_factory=list)

    @property
    def window(self):
        return self.core + 2 * self.margin

    @property
    def padding(self):
        """``(low, high)`` zero padding per axis."""
        return [(self.margin, self.margin + max(0, self.core - d)) for d in self.dims]

    def coverage(self):
        cov = np.zeros(self.dims, dtype=np.int32)
        for t in self.tiles:
            sl = tuple(slice(o, o + e) for o, e in zip(t.out_origin, t.extent))
            cov[sl] += 1
        return cov


def _axis_plan(dim, core):
    out = []
    for s in range(0, dim, core):
        c = max(0, min(s, dim - core))
        out.append((c, s, min(core, dim - s), s - c))
    return out


def plan_tiles(dims, core=CORE, margin=MARGIN) -> TilePlan:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be 3 positive sizes, got {dims}")
    axes = [_axis_plan(d, core) for d in dims]
    plan = TilePlan(dims, core, margin)
    for az in axes[0]:
        for ay in axes[1]:
            for ax in axes[2]:
                a = (az, ay, ax)
                # the window for computed core [c, c + core) starts at c in padded coords
                plan.tiles.append(Tile(tuple(t[0] for t in a), tuple(t[1] for t in a),
                                       tuple(t[2] for t in a), tuple(t[3] for t in a)))
    return plan


def standardize(subject: Subject):
    """Stack modalities as ``[M, D, H, W]`` float32, each zero-mean unit-variance
    over the brain mask and exactly zero outside it."""
    mask = subject.mask if subject.mask is not None else np.ones(subject.dims, bool)
    out = np.zeros((len(subject.modalities),) + subject.dims, dtype=np.float32)
    for i, vol in enumerate(subject.modalities):
        v = vol.data.astype(np.float64)
        vals = v[mask]
        mu = vals.mean() if vals.size else 0.0
        sd = vals.std() if vals.size else 1.0
        out[i][mask] = ((vals - mu) / (sd if sd > 0 else 1.0)).astype(np.float32)
    return out


def _network(model):
    if isinstance(model, Network):
        return model
    if isinstance(model, Checkpoint):
        return model.network()
    raise TypeError(f"expected a Network or Checkpoint, got {type(model).__name__}")


def segment(model, subject: Subject, core=CORE, conv_method=None, images=None):
    """Label volume (uint8) and per-class probabilities ``[4, D, H, W]`` float32.

    ``images`` may pass already standardised modalities.
    """
    net = _network(model)
    if len(subject.modalities) != len(MODALITIES):
        raise SpecMismatch(f"network expects {len(MODALITIES)} modalities, "
                           f"subject {subject.id} has {len(subject.modalities)}")
    margin = net.spec.shrink // 2
    x = standardize(subject) if images is None else np.asarray(images, dtype=np.float32)
    plan = plan_tiles(subject.dims, core, margin)
    padded = np.pad(x, [(0, 0)] + plan.padding)
    n_cls = net.spec.classifier.kernels
    probs = np.zeros((n_cls,) + subject.dims, dtype=np.float32)
    w = plan.window
    for t in plan.tiles:
        z, y, xx = t.in_origin
        win = padded[None, :, z:z + w, y:y + w, xx:xx + w]
        p = ops.softmax(net.logits(win, conv_method=conv_method).astype(np.float64))[0]
        src = tuple(slice(o, o + e) for o, e in zip(t.offset, t.extent))
        dst = tuple(slice(o, o + e) for o, e in zip(t.out_origin, t.extent))
        probs[(slice(None),) + dst] = p[(slice(None),) + src]
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    if subject.mask is not None:
        outside = ~subject.mask
        labels[outside] = 0
        probs[:, outside] = 0.0
        probs[0, outside] = 1.0
    return labels, probs
