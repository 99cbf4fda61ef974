"""Tensor helpers.

Tensors are plain numpy arrays in row-major ``[C, D, H, W]`` (feature map)
or ``[B, C, D, H, W]`` (batch) layout.  The functions here validate shapes
and raise the package's exceptions instead of relying on numpy broadcasting.
"""
import os

import numpy as np

from .errors import (CropTooLarge, EmptyInput, NonFiniteError, ShapeMismatch,
                     SpatialMismatch)

DEBUG = os.environ.get("HD3D_DEBUG", "").lower() not in ("", "0", "false")


def check_finite(t, where=""):
    """Raise NonFiniteError on NaN/Inf. Only active with ``HD3D_DEBUG`` set."""
    if DEBUG and not np.all(np.isfinite(t)):
        raise NonFiniteError(f"non-finite values produced by {where or 'op'}")
    return t


def channel_axis(t):
    if t.ndim == 4:
        return 0
    if t.ndim == 5:
        return 1
    raise ShapeMismatch(f"expected a 4-D or 5-D tensor, got shape {t.shape}")


def concat_channels(parts):
    """Concatenate along the channel axis, preserving the order of ``parts``."""
    if len(parts) == 0:
        raise EmptyInput("concat_channels needs at least one part")
    ax = channel_axis(parts[0])
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:ax] != ref[:ax] \
                or p.shape[ax + 1:] != ref[ax + 1:]:
            raise SpatialMismatch(
                f"cannot concatenate {p.shape} with {ref} along channels")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=ax)


def split_channels(t, sizes):
    ax = channel_axis(t)
    if sum(sizes) != t.shape[ax]:
        raise ShapeMismatch(f"sizes {sizes} do not sum to {t.shape[ax]}")
    return np.split(t, np.cumsum(sizes)[:-1], axis=ax)


def center_crop(t, margin):
    """Remove ``margin`` voxels from both ends of every spatial axis."""
    if margin < 0:
        raise CropTooLarge(f"negative margin {margin}")
    if margin == 0:
        return t
    ax = channel_axis(t)
    spatial = t.shape[ax + 1:]
    if any(s <= 2 * margin for s in spatial):
        raise CropTooLarge(f"margin {margin} too large for spatial dims {spatial}")
    sl = (slice(None),) * (ax + 1) + (slice(margin, -margin),) * 3
    return t[sl]


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise {op}: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return check_finite(fn(a, b), op)


def scale(t, s):
    return check_finite(t * t.dtype.type(s), "scale")


def reduce(t, axes=None, how="sum"):
    if how == "sum":
        return np.sum(t, axis=axes)
    if how == "mean":
        return np.mean(t, axis=axes)
    if how == "max":
        return np.max(t, axis=axes)
    raise ValueError(f"unknown reduction {how!r}")


def argmax_channels(t):
    """Per-voxel argmax over channels; ties go to the lowest channel index."""
    return np.argmax(t, axis=channel_axis(t)).astype(np.uint8)
