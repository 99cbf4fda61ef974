"""Forward/backward pairs for the non-convolution layer primitives.

Forward functions return ``(output, cache)``; backward functions take the
upstream gradient and that cache.  Layout is ``[B, C, D, H, W]`` throughout.
"""
import numpy as np

from .errors import InvalidRate, LabelOutOfRange, MissingRunningStats, ShapeMismatch

_RED = (0, 2, 3, 4)


def _per_channel(v):
    return v.reshape(1, -1, 1, 1, 1)


# -- batch normalisation ----------------------------------------------------

def batchnorm_forward(x, gamma, beta, mode, running=None, eps=1e-5, momentum=0.9):
    """Per-channel normalisation over batch and spatial axes.

    In ``train`` mode uses batch statistics and, when ``running`` (a dict
    with ``mean``/``var`` arrays) is given, updates it in place with
    ``running = momentum * running + (1 - momentum) * batch`` (variance
    unbiased).  ``infer`` mode normalises with the running statistics.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"gamma/beta must have length {C}")
    if mode == "train":
        mean = x.mean(axis=_RED)
        xc = x - _per_channel(mean)
        var = (xc * xc).mean(axis=_RED)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * _per_channel(inv.astype(x.dtype))
        if running is not None:
            n = x.size // C
            unbiased = var * (n / max(n - 1, 1))
            running["mean"][...] = momentum * running["mean"] + (1 - momentum) * mean
            running["var"][...] = momentum * running["var"] + (1 - momentum) * unbiased
        cache = (xhat, inv.astype(x.dtype), gamma)
    elif mode == "infer":
        if running is None or "mean" not in running or "var" not in running:
            raise MissingRunningStats("infer-mode batchnorm needs running statistics")
        inv = (1.0 / np.sqrt(running["var"] + eps)).astype(x.dtype)
        xhat = (x - _per_channel(running["mean"].astype(x.dtype))) * _per_channel(inv)
        cache = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = xhat * _per_channel(gamma) + _per_channel(beta)
    return y, cache


def batchnorm_backward(gy, cache):
    """Full adjoint through the batch statistics (train mode)."""
    xhat, inv, gamma = cache
    ggamma = (gy * xhat).sum(axis=_RED)
    gbeta = gy.sum(axis=_RED)
    gxhat = gy * _per_channel(gamma)
    m1 = gxhat.mean(axis=_RED)
    m2 = (gxhat * xhat).mean(axis=_RED)
    gx = (gxhat - _per_channel(m1) - xhat * _per_channel(m2)) * _per_channel(inv)
    return gx, ggamma, gbeta


# -- PReLU ------------------------------------------------------------------

def prelu_forward(x, a):
    if a.shape != (x.shape[1],):
        raise ShapeMismatch(f"prelu slope must have length {x.shape[1]}")
    pos = x > 0
    y = np.where(pos, x, x * _per_channel(a))
    return y, (x, pos, a)


def prelu_backward(gy, cache):
    x, pos, a = cache
    gx = np.where(pos, gy, gy * _per_channel(a))
    ga = np.where(pos, 0, gy * x).sum(axis=_RED)
    return gx, ga.astype(a.dtype)


# -- dropout ----------------------------------------------------------------

def dropout_forward(x, rate, mode, rng=None, mask=None):
    """Inverted dropout. ``mask`` (if given) is reused instead of drawing."""
    if not 0 <= rate < 1:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or a frozen mask")
        keep = rng.random(x.size).reshape(x.shape) >= rate
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(gy, mask):
    return gy if mask is None else gy * mask


# -- softmax cross-entropy --------------------------------------------------

def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, targets):
    """Mean voxel cross-entropy and its gradient wrt ``logits``.

    ``logits`` is ``[B, K, D, H, W]``, ``targets`` integer ``[B, D, H, W]``.
    """
    B, K = logits.shape[:2]
    if targets.shape != (B,) + logits.shape[2:]:
        raise ShapeMismatch(f"targets {targets.shape} do not match logits {logits.shape}")
    t = np.asarray(targets).astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= K):
        raise LabelOutOfRange(f"labels must lie in 0..{K - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    n = t.size
    loss = -picked.sum(dtype=np.float64) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
    grad /= logits.dtype.type(n)
    return float(loss), grad
