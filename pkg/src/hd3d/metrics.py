"""Segmentation metrics: Dice, modified Hausdorff and average symmetric surface distance.

Surfaces are 6-connectivity boundary voxels (a foreground voxel with at
least one background face neighbour, the volume border counting as
background).  Distances are between voxel centres in mm.

Directed surface distances are obtained from a Euclidean distance transform
of the target surface; the transform only supplies the nearest surface voxel,
and the distance itself is recomputed from the integer offset with the same
expression the brute-force oracle uses, so both agree bit for bit.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import _accel
from .errors import DimMismatch, EmptySurface

CLASSES = {1: "CSF", 2: "GM", 3: "WM"}
MHD_MODES = ("percentile95", "dubuisson_jain")


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class SurfacePointSet:
    voxels: np.ndarray                 # (n, 3) int64 voxel indices
    spacing: tuple = (1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.voxels)

    @property
    def mm(self):
        return self.voxels * np.asarray(self.spacing, dtype=np.float64)


def _as_mask(m, spacing=None):
    if isinstance(m, BinaryMask):
        return m.data, tuple(spacing or m.spacing)
    return np.asarray(m, dtype=bool), tuple(spacing or (1.0, 1.0, 1.0))


def _pair(a, b, spacing):
    a, sa = _as_mask(a, spacing)
    b, sb = _as_mask(b, spacing)
    if a.shape != b.shape:
        raise DimMismatch(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b, sa


def dice(a, b) -> float:
    a, b, _ = _pair(a, b, None)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


# -- surfaces ----------------------------------------------------------------

@_accel.optional_njit(cache=True)
def _surface_nb(m):
    D, H, W = m.shape
    out = np.zeros(m.shape, dtype=np.bool_)
    for z in range(D):
        for y in range(H):
            for x in range(W):
                if not m[z, y, x]:
                    continue
                if (z == 0 or z == D - 1 or y == 0 or y == H - 1 or x == 0 or x == W - 1
                        or not m[z - 1, y, x] or not m[z + 1, y, x]
                        or not m[z, y - 1, x] or not m[z, y + 1, x]
                        or not m[z, y, x - 1] or not m[z, y, x + 1]):
                    out[z, y, x] = True
    return out


def _surface_np(m):
    p = np.pad(m, 1, constant_values=False)
    c = p[1:-1, 1:-1, 1:-1]
    interior = (c & p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
                & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
                & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return c & ~interior


def surface_mask(m, use_numba=None):
    m = np.ascontiguousarray(_as_mask(m)[0])
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    if use_numba and _accel._HAVE_NUMBA:
        return _surface_nb(m)
    return _surface_np(m)


def extract_surface(m, spacing=None, use_numba=None) -> SurfacePointSet:
    data, sp = _as_mask(m, spacing)
    return SurfacePointSet(np.argwhere(surface_mask(data, use_numba)).astype(np.int64), sp)


# -- distances ---------------------------------------------------------------

def offset_distance(offsets, spacing):
    """Euclidean length in mm of integer voxel offsets ``(n, 3)``."""
    o = offsets.astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt(o[:, 0] * o[:, 0] + o[:, 1] * o[:, 1] + o[:, 2] * o[:, 2])


def directed_distances(src: SurfacePointSet, dst_surface_mask, spacing):
    """Distance from each voxel in ``src`` to the nearest voxel of a surface mask."""
    _, idx = distance_transform_edt(~dst_surface_mask, sampling=spacing,
                                    return_distances=True, return_indices=True)
    p = src.voxels
    nearest = idx[:, p[:, 0], p[:, 1], p[:, 2]].T
    return offset_distance(nearest - p, spacing)


def _surfaces(a, b, spacing):
    a, b, sp = _pair(a, b, spacing)
    ma, mb = surface_mask(a), surface_mask(b)
    sa = SurfacePointSet(np.argwhere(ma).astype(np.int64), sp)
    sb = SurfacePointSet(np.argwhere(mb).astype(np.int64), sp)
    if len(sa) == 0 or len(sb) == 0:
        raise EmptySurface("surface distance undefined for an empty mask")
    return sa, sb, ma, mb, sp


def nearest_rank(d, q=0.95):
    s = np.sort(d)
    return float(s[max(math.ceil(q * len(s)), 1) - 1])


def _mhd_from(dab, dba, mode):
    if mode == "percentile95":
        return max(nearest_rank(dab), nearest_rank(dba))
    if mode == "dubuisson_jain":
        return max(float(dab.mean()), float(dba.mean()))
    raise ValueError(f"unknown mhd mode {mode!r}; expected one of {MHD_MODES}")


def both_directed(a, b, spacing=None):
    sa, sb, ma, mb, sp = _surfaces(a, b, spacing)
    return directed_distances(sa, mb, sp), directed_distances(sb, ma, sp)


def mhd(a, b, mode="percentile95", spacing=None) -> float:
    dab, dba = both_directed(a, b, spacing)
    return _mhd_from(dab, dba, mode)


def asd(a, b, spacing=None) -> float:
    dab, dba = both_directed(a, b, spacing)
    return (float(dab.sum()) + float(dba.sum())) / (len(dab) + len(dba))


# -- per-subject evaluation --------------------------------------------------

@dataclass
class ClassMetrics:
    dc: float
    mhd: float = float("nan")
    asd: float = float("nan")
    mhd_dj: float = float("nan")
    defined: bool = True


@dataclass
class MetricsReport:
    subject: str
    classes: dict = field(default_factory=dict)        # name -> ClassMetrics
    mhd_mode: str = "percentile95"
    config_hash: str = ""

    def rows(self, all_variants=False):
        out = []
        for name, m in self.classes.items():
            out.append((self.subject, name, m.dc, m.mhd, m.asd, self.mhd_mode))
            if all_variants:
                other = "dubuisson_jain" if self.mhd_mode == "percentile95" else "percentile95"
                out.append((self.subject, name, m.dc, m.mhd_dj, m.asd, other))
        return out

    def mean_dc(self):
        return float(np.mean([m.dc for m in self.classes.values()]))


def config_hash(spacing, mode):
    cfg = {"connectivity": 6, "distance": "voxel_centre_euclidean",
           "mhd_mode": mode, "percentile": "nearest_rank_0.95",
           "spacing": [float(s) for s in spacing]}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(pred, ref, spacing=(1.0, 1.0, 1.0), subject="", mode="percentile95"):
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise DimMismatch(f"prediction dims {pred.shape} differ from reference {ref.shape}")
    if mode not in MHD_MODES:
        raise ValueError(f"unknown mhd mode {mode!r}")
    other = "dubuisson_jain" if mode == "percentile95" else "percentile95"
    rep = MetricsReport(subject, mhd_mode=mode, config_hash=config_hash(spacing, mode))
    for k, name in CLASSES.items():
        a, b = pred == k, ref == k
        cm = ClassMetrics(dice(a, b))
        try:
            dab, dba = both_directed(a, b, spacing)
        except EmptySurface:
            cm.defined = False
        else:
            cm.mhd = _mhd_from(dab, dba, mode)
            cm.mhd_dj = _mhd_from(dab, dba, other)
            cm.asd = (float(dab.sum()) + float(dba.sum())) / (len(dab) + len(dba))
        rep.classes[name] = cm
    return rep


def format_table(reports, all_variants=False):
    """Plain-text table: one row per subject, DC/MHD/ASD columns per class."""
    names = list(CLASSES.values())
    head = f"{'subject':<14s}" + "".join(f"| {n:^26s}" for n in names)
    sub = f"{'':<14s}" + "".join(f"| {'DC':>7s} {'MHD':>8s} {'ASD':>8s} " for _ in names)
    lines = [head, sub, "-" * len(sub)]

    def fmt(v):
        return f"{v:8.3f}" if np.isfinite(v) else f"{'undef':>8s}"

    for r in reports:
        cells = "".join(f"| {r.classes[n].dc:7.4f} {fmt(r.classes[n].mhd)} {fmt(r.classes[n].asd)} "
                        for n in names)
        lines.append(f"{r.subject:<14s}{cells}")
        if all_variants:
            cells = "".join(f"| {'':7s} {fmt(r.classes[n].mhd_dj)} {'':8s} " for n in names)
            lines.append(f"{'  (alt MHD)':<14s}{cells}")
    lines.append(f"mhd_mode={reports[0].mhd_mode if reports else ''}  "
                 f"config={reports[0].config_hash if reports else ''}")
    return "\n".join(lines)
