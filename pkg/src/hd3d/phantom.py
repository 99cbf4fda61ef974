"""Synthetic two-modality brain phantoms.

Geometry is a perturbed ellipsoid with nested shells: background outside,
then CSF, a GM ribbon and a WM core.  Each interface sits at normalised
radius ``base * (1 + sum_m amp * [sin(f_m * theta + p) + sin(theta) * sin(f_m * phi + q)])``
with seeded phases; the ``sin(theta)`` factor keeps the surface single-valued
at the poles.

Contrast: T1-like intensities are ordered WM > GM > CSF, T2-like CSF > GM >
WM.  GM and WM differ by under 1.5 noise standard deviations in either
modality, with opposite signs, so only the pair separates them well.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DegenerateGeometry
from .rng import Rng
from .volio import Subject, Volume

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
CLASS_NAMES = ("background", "CSF", "GM", "WM")


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    seed: int = 0
    # noise sd as a fraction of each modality's dynamic range; scalar or (t1, t2)
    noise_sigma: object = 0.03
    # per-class means [bg, csf, gm, wm]
    t1_means: tuple = (0.0, 0.25, 0.55, 0.575)
    t2_means: tuple = (0.0, 0.90, 0.55, 0.51)
    # normalised interface radii: outer (bg/csf), csf/gm, gm/wm
    radii: tuple = (1.0, 0.84, 0.6)
    semi_axes: tuple = (0.42, 0.40, 0.38)     # fraction of each dim
    axis_jitter: float = 0.04
    perturb_amplitude: float = 0.015
    perturb_frequencies: tuple = (3, 5)
    bias_amplitude: float = 0.0
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        for name, means in (("t1_means", self.t1_means), ("t2_means", self.t2_means)):
            if len(means) != 4 or len(set(means)) != 4:
                raise DegenerateGeometry(f"{name} must hold 4 distinct class means")
        if min(self.sigmas()) < 0:
            raise DegenerateGeometry("noise_sigma must be >= 0")
        if not 0 <= self.bias_amplitude <= 0.2:
            raise DegenerateGeometry("bias_amplitude must lie in [0, 0.2]")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise DegenerateGeometry(f"dims {self.dims} too small")

    def sigmas(self):
        s = self.noise_sigma
        return tuple(float(v) for v in s) if np.ndim(s) else (float(s), float(s))


def _radius_fn(base, amp, freqs, phases):
    def r(theta, phi):
        s = np.zeros_like(theta)
        for f, (p, q) in zip(freqs, phases):
            s += np.sin(f * theta + p) + np.sin(theta) * np.sin(f * phi + q)
        return base * (1.0 + amp * s)
    return r


def class_map(cfg: PhantomConfig, rng: Rng):
    """Noise-free label volume for ``cfg`` (integers 0..3)."""
    D, H, W = cfg.dims
    jitter = 1.0 + cfg.axis_jitter * (2 * rng.random(3) - 1)
    axes = np.array(cfg.semi_axes) * np.array(cfg.dims) * jitter
    center = (np.array(cfg.dims) - 1) / 2.0
    amp, freqs = cfg.perturb_amplitude, cfg.perturb_frequencies
    max_dev = amp * 2 * len(freqs)
    r_out, r_gm, r_wm = cfg.radii
    if not r_out > r_gm > r_wm > 0:
        raise DegenerateGeometry(f"radii {cfg.radii} must strictly decrease")
    # worst case: neighbouring interfaces deviate in opposite directions
    if r_out * (1 - max_dev) <= r_gm * (1 + max_dev) or \
            r_gm * (1 - max_dev) <= r_wm * (1 + max_dev):
        raise DegenerateGeometry("perturbation amplitude would let shells cross")
    if np.any(axes * r_out * (1 + max_dev) >= center):
        raise DegenerateGeometry("outer surface does not fit inside the volume")
    fns = []
    for base in cfg.radii:
        phases = (2 * np.pi * rng.random(2 * len(freqs))).reshape(len(freqs), 2)
        fns.append(_radius_fn(base, amp, freqs, phases))

    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in cfg.dims), indexing="ij")
    u = (z - center[0]) / axes[0]
    v = (y - center[1]) / axes[1]
    w = (x - center[2]) / axes[2]
    rho = np.sqrt(u * u + v * v + w * w)
    theta = np.arccos(np.clip(np.divide(u, rho, out=np.zeros_like(u), where=rho > 0), -1, 1))
    phi = np.arctan2(w, v)
    lab = np.zeros(cfg.dims, dtype=np.uint8)
    for cls, fn in zip((CSF, GM, WM), fns):
        lab[rho <= fn(theta, phi)] = cls
    return lab


def bias_field(cfg: PhantomConfig, rng: Rng):
    """Smooth multiplicative field, trilinear over a 3x3x3 control grid."""
    ctrl = 1.0 + cfg.bias_amplitude * (2 * rng.random(27) - 1)
    ctrl = ctrl.reshape(3, 3, 3)
    coords = np.meshgrid(*(np.linspace(0, 2, n) for n in cfg.dims), indexing="ij")
    return map_coordinates(ctrl, coords, order=1, mode="nearest")


def generate(cfg: PhantomConfig = None, subject_id=None) -> Subject:
    cfg = cfg or PhantomConfig()
    cfg.validate()
    rng = Rng(cfg.seed, "phantom")
    lab = class_map(cfg, rng.spawn("geometry"))
    counts = np.bincount(lab.ravel(), minlength=4)
    if counts.min() < 0.01 * lab.size:
        raise DegenerateGeometry(f"class voxel counts {counts.tolist()} below 1% of volume")
    field = bias_field(cfg, rng.spawn("bias")) if cfg.bias_amplitude > 0 else None
    mods = []
    for key, means, frac in zip(("t1", "t2"), (cfg.t1_means, cfg.t2_means), cfg.sigmas()):
        means = np.asarray(means, dtype=np.float64)
        img = means[lab]
        if field is not None:
            img = img * field
        sigma = frac * (means.max() - means.min())
        if sigma > 0:
            img = img + rng.spawn("noise", key).normal(lab.size, scale=sigma).reshape(lab.shape)
        mods.append(Volume(img.astype(np.float32), cfg.spacing, "intensity"))
    sid = subject_id or f"phantom{cfg.seed:03d}"
    return Subject(sid, mods, Volume(lab, cfg.spacing, "label"), lab > 0)
