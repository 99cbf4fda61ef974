"""Central finite-difference checks of every differentiable primitive.

Each check draws unit-scale double-precision data, reduces the op's output
to a scalar with a fixed random projection (or uses the cross-entropy loss
directly), and compares analytic gradients with the fourth-order central
difference ``(8[f(t+h) - f(t-h)] - [f(t+2h) - f(t-2h)]) / 12h`` on randomly
sampled coordinates.  The relative error is ``|a - n| / max(|a|, |n|, 1e-5)``:
the floor keeps coordinates whose true gradient is exactly zero (a conv bias
feeding only batch-norm layers) from turning rounding noise into failures.

PReLU is piecewise linear, so a perturbation that moves any pre-activation
across zero makes the difference quotient meaningless.  When the sign
pattern at any stencil point differs from the one at ``t`` the coordinate is
re-evaluated with ``h / 10`` (up to three times); such retries are counted
in the report.
"""
from dataclasses import dataclass, field

import numpy as np

from . import conv, ops
from .graph import TapeState, backward, forward
from .netbuild import LayerSpec, build, standard_spec
from .rng import Rng

H = 1e-4
TOL = 1e-6
FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float = 0.0
    coords: int = 0
    kink_retries: int = 0
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.coords > 0 and self.max_rel_err < TOL

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<14s} {status}  max_rel_err={self.max_rel_err:.3e}  "
                f"coords={self.coords}  kink_retries={self.kink_retries}")


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def _coords(shape, n, rng):
    size = int(np.prod(shape))
    if size <= n:
        return np.arange(size)
    # distinct coordinates, deterministic: shuffle via sort of random keys
    return np.argsort(rng.random(size), kind="stable")[:n]


def check(name, f, tensors, analytic, rng, n_coords=100, h=H):
    """Generic driver.

    ``f()`` evaluates the scalar objective from the *current* contents of
    ``tensors`` and returns ``(value, signature)``; ``signature`` is an
    opaque comparable used for kink detection (``None`` if not needed).
    """
    res = CheckResult(name)
    _, sig0 = f()
    for tname, t in tensors.items():
        flat = t.reshape(-1)
        g = analytic[tname].reshape(-1)
        worst = 0.0
        for idx in _coords(t.shape, n_coords, rng.spawn(tname)):
            orig = flat[idx]
            step = h
            for attempt in range(4):
                vals, sigs = [], []
                for mult in (1, -1, 2, -2):
                    flat[idx] = orig + mult * step
                    v, sg = f()
                    vals.append(v)
                    sigs.append(sg)
                flat[idx] = orig
                if sig0 is None or all(_same(sg, sig0) for sg in sigs):
                    break
                res.kink_retries += 1
                step /= 10
            fp, fm, f2p, f2m = vals
            num = (8.0 * (fp - fm) - (f2p - f2m)) / (12.0 * step)
            e = rel_err(float(g[idx]), num)
            worst = max(worst, e)
            res.coords += 1
        res.per_tensor[tname] = worst
        res.max_rel_err = max(res.max_rel_err, worst)
    return res


def _same(a, b):
    if a is None or b is None:
        return a is b
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _data(rng, *shape):
    return rng.normal(int(np.prod(shape))).reshape(shape)


# -- primitives ---------------------------------------------------------------

def check_conv3d(seed=0, method=None, n_coords=100):
    rng = Rng(seed, "gradcheck", "conv3d")
    x = _data(rng, 2, 3, 6, 5, 7)
    w = _data(rng, 4, 3, 3, 3, 3)
    b = _data(rng, 4)
    R = _data(rng, *conv.out_shape(x.shape, w.shape))
    gx, gw, gb = conv.conv3d_backward(R, x, w, method=method)

    def f():
        return float(np.sum(conv.conv3d_forward(x, w, b, method=method) * R)), None

    return check("conv3d", f, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb},
                 rng, n_coords)


def check_conv3d_1x1(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "conv3d_1x1")
    x = _data(rng, 2, 5, 3, 4, 3)
    w = _data(rng, 3, 5, 1, 1, 1)
    b = _data(rng, 3)
    R = _data(rng, 2, 3, 3, 4, 3)
    gx, gw, gb = conv.conv3d_backward(R, x, w)

    def f():
        return float(np.sum(conv.conv3d_forward(x, w, b) * R)), None

    return check("conv3d_1x1", f, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb},
                 rng, n_coords)


def check_batchnorm(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "batchnorm")
    x = _data(rng, 3, 4, 3, 4, 3) * 1.5 + 0.3
    gamma = 1.0 + 0.3 * _data(rng, 4)
    beta = _data(rng, 4)
    R = _data(rng, *x.shape)
    _, cache = ops.batchnorm_forward(x, gamma, beta, "train")
    gx, gg, gb = ops.batchnorm_backward(R, cache)

    def f():
        y, _ = ops.batchnorm_forward(x, gamma, beta, "train")
        return float(np.sum(y * R)), None

    return check("batchnorm", f, {"x": x, "gamma": gamma, "beta": beta},
                 {"x": gx, "gamma": gg, "beta": gb}, rng, n_coords)


def check_prelu(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "prelu")
    x = _data(rng, 2, 3, 4, 4, 4)
    a = 0.25 + 0.1 * _data(rng, 3)
    R = _data(rng, *x.shape)
    _, cache = ops.prelu_forward(x, a)
    gx, ga = ops.prelu_backward(R, cache)

    def f():
        y, (_, pos, _) = ops.prelu_forward(x, a)
        return float(np.sum(y * R)), (pos.copy(),)

    return check("prelu", f, {"x": x, "a": a}, {"x": gx, "a": ga}, rng, n_coords)


def check_dropout(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "dropout")
    x = _data(rng, 2, 3, 4, 4, 4)
    R = _data(rng, *x.shape)
    _, mask = ops.dropout_forward(x, 0.5, "train", rng=rng.spawn("mask"))
    gx = ops.dropout_backward(R, mask)

    def f():
        y, _ = ops.dropout_forward(x, 0.5, "train", mask=mask)
        return float(np.sum(y * R)), None

    return check("dropout", f, {"x": x}, {"x": gx}, rng, n_coords)


def check_softmax_xent(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "softmax_xent")
    logits = _data(rng, 2, 4, 3, 3, 3)
    targets = rng.integers(4, 2 * 27).reshape(2, 3, 3, 3)
    _, grad = ops.softmax_xent(logits, targets)

    def f():
        return ops.softmax_xent(logits, targets)[0], None

    return check("softmax_xent", f, {"logits": logits}, {"logits": grad}, rng, n_coords)


# -- composite ----------------------------------------------------------------

def composite_spec():
    """Three hyper-dense conv layers, one dropout fully-conv layer, classifier."""
    return standard_spec(
        "hyperdense",
        conv_layers=[LayerSpec(f"conv_{i}", 3, 3) for i in (1, 2, 3)],
        fully_layers=[LayerSpec("fully_conv_1", 1, 5, dropout=True)],
    )


def check_hyperdense_block(seed=0, n_coords=100):
    rng = Rng(seed, "gradcheck", "hyperdense3")
    net = build(composite_spec(), seed=seed, dtype=np.float64)
    g = net.graph
    # perturb parameters away from their structured init (unit BN, equal slopes)
    for name, p in g.params.items():
        if name.endswith("bn_gamma"):
            p[...] = 1.0 + 0.2 * _data(rng, *p.shape)
        elif name.endswith(("bn_beta", "bias")):
            p[...] = 0.2 * _data(rng, *p.shape)
        elif name.endswith("prelu"):
            p[...] = 0.25 + 0.1 * _data(rng, *p.shape)
    images = _data(rng, 2, 2, 9, 9, 9)
    labels = rng.integers(4, 2 * 27).reshape(2, 3, 3, 3)
    feed = net.feed(images, labels)

    base = TapeState()
    forward(g, feed, "train", tape=base, rng=rng.spawn("dropout"), outputs=["loss"],
            update_stats=False)
    masks = {i: m for i, m in base.caches.items() if g.nodes[i].op == "dropout"}
    grads = backward(g, base)
    prelu_ids = [n.id for n in g.nodes if n.op == "prelu"]

    def f():
        tape = TapeState(frozen_masks=masks)
        out = forward(g, feed, "train", tape=tape, outputs=["loss"], update_stats=False)
        tape.done = True
        return float(out["loss"]), tuple(tape.caches[i][1].copy() for i in prelu_ids)

    return check("hyperdense3", f, g.params, grads, rng, n_coords)


CHECKS = {
    "conv3d": check_conv3d,
    "conv3d_1x1": check_conv3d_1x1,
    "batchnorm": check_batchnorm,
    "prelu": check_prelu,
    "dropout": check_dropout,
    "softmax_xent": check_softmax_xent,
    "hyperdense3": check_hyperdense_block,
}


def run(names="all", seed=0, n_coords=100):
    if names == "all":
        names = list(CHECKS)
    elif isinstance(names, str):
        names = [names]
    return [CHECKS[n](seed=seed, n_coords=n_coords) for n in names]
