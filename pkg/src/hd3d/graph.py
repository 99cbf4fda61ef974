"""Static computation graph with reverse-mode differentiation.

A :class:`Graph` is a topologically ordered list of :class:`Node` objects.
Parameters live in ``graph.params`` (trainable) and ``graph.buffers``
(batch-norm running statistics); ``param`` nodes refer to them by name.
:func:`forward` records what the backward pass needs in a :class:`TapeState`,
and :func:`backward` walks the nodes in reverse accumulating gradients.
"""
from dataclasses import dataclass, field

import numpy as np

from . import conv, ops
from .errors import BackwardBeforeForward, InvalidSpec, UnboundInput
from .tensor import center_crop, check_finite, concat_channels

OPS = ("input", "param", "conv3d", "batchnorm", "prelu", "dropout", "concat",
       "crop", "softmax_xent")


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    name: str = ""
    attrs: dict = field(default_factory=dict)


@dataclass
class TapeState:
    """Per-forward record: node values, backward caches and the dropout RNG."""
    mode: str = "train"
    rng: object = None
    values: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)
    frozen_masks: dict = None
    done: bool = False


class Graph:
    def __init__(self):
        self.nodes = []
        self.params = {}
        self.buffers = {}
        self.inputs = {}
        self.outputs = {}
        self._param_nodes = {}

    def add(self, op, inputs=(), name="", **attrs):
        if op not in OPS:
            raise InvalidSpec(f"unknown op {op!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise InvalidSpec(f"node input {i} does not precede node {len(self.nodes)}")
        if op == "conv3d":
            k = attrs.get("kernel", 1)
            if k < 1 or k % 2 == 0:
                raise InvalidSpec(f"conv kernel edge must be odd and >= 1, got {k}")
        if op == "dropout" and not 0 <= attrs.get("rate", 0.0) < 1:
            raise InvalidSpec(f"invalid dropout rate {attrs.get('rate')}")
        node = Node(len(self.nodes), op, inputs, name, attrs)
        self.nodes.append(node)
        return node.id

    def input(self, name, kind="image"):
        if name in self.inputs:
            raise InvalidSpec(f"duplicate input {name!r}")
        self.inputs[name] = self.add("input", name=name, kind=kind)
        return self.inputs[name]

    def param(self, name, value):
        if name in self.params:
            raise InvalidSpec(f"duplicate parameter {name!r}")
        self.params[name] = value
        self._param_nodes[name] = self.add("param", name=name)
        return self._param_nodes[name]

    def buffer(self, name, value):
        if name in self.buffers:
            raise InvalidSpec(f"duplicate buffer {name!r}")
        self.buffers[name] = value

    def mark_output(self, name, node_id):
        self.outputs[name] = node_id

    def ancestors(self, node_ids):
        need = set()
        stack = list(node_ids)
        while stack:
            i = stack.pop()
            if i in need:
                continue
            need.add(i)
            stack.extend(self.nodes[i].inputs)
        return need

    def ops_summary(self):
        """List of ``(op, name, attrs)``, used for structural comparisons."""
        return [(n.op, n.name, dict(n.attrs), n.inputs) for n in self.nodes]


def _running(graph, node):
    names = node.attrs.get("running")
    if not names:
        return None
    return {"mean": graph.buffers[names[0]], "var": graph.buffers[names[1]]}


def forward(graph, inputs, mode="train", tape=None, rng=None, outputs=None,
            conv_method=None, update_stats=True):
    """Evaluate the graph and return ``{output name: value}``.

    ``outputs`` selects which named outputs to compute (default: all whose
    inputs are bound).  Pass a ``TapeState`` to enable :func:`backward`.
    """
    if outputs is None:
        outputs = [n for n, i in graph.outputs.items()
                   if all(graph.nodes[j].name in inputs
                          for j in graph.ancestors([i]) if graph.nodes[j].op == "input")]
    targets = [graph.outputs[n] for n in outputs]
    need = graph.ancestors(targets)
    keep = tape is not None
    if tape is None:
        tape = TapeState()
    tape.mode, tape.rng = mode, rng
    tape.values, tape.caches, tape.done = {}, {}, False
    vals = tape.values

    # drop intermediates after their last use when nobody will call backward
    last_use = {}
    if not keep:
        for n in graph.nodes:
            if n.id in need:
                for i in n.inputs:
                    last_use[i] = n.id
    pinned = set(targets)

    dtype = next(iter(graph.params.values())).dtype if graph.params else None
    for n in graph.nodes:
        if n.id not in need:
            continue
        if n.op == "input":
            if n.name not in inputs:
                raise UnboundInput(f"input {n.name!r} is not bound")
            v = inputs[n.name]
            if n.attrs.get("kind") != "labels":
                v = np.asarray(v, dtype=dtype) if dtype is not None else np.asarray(v)
        elif n.op == "param":
            v = graph.params[n.name]
        else:
            args = [vals[i] for i in n.inputs]
            v = _forward_node(graph, n, args, tape, conv_method, update_stats)
        vals[n.id] = v
        if not keep:
            for i in n.inputs:
                if last_use.get(i) == n.id and i not in pinned and graph.nodes[i].op != "param":
                    vals.pop(i, None)
    tape.done = keep
    return {name: vals[graph.outputs[name]] for name in outputs}


def _forward_node(graph, n, args, tape, conv_method, update_stats):
    op, a = n.op, n.attrs
    if op == "conv3d":
        x, w, b = args
        if x.dtype != w.dtype:
            x = x.astype(w.dtype)
        v = conv.conv3d_forward(x, w, b, method=conv_method)
        tape.caches[n.id] = x
        return check_finite(v, n.name)
    if op == "batchnorm":
        x, g, b = args
        running = _running(graph, n) if (update_stats or tape.mode == "infer") else None
        v, cache = ops.batchnorm_forward(x, g, b, tape.mode, running,
                                         eps=a.get("eps", 1e-5),
                                         momentum=a.get("momentum", 0.9))
        tape.caches[n.id] = cache
        return v
    if op == "prelu":
        v, cache = ops.prelu_forward(*args)
        tape.caches[n.id] = cache
        return v
    if op == "dropout":
        mask = None
        if tape.frozen_masks is not None:
            mask = tape.frozen_masks.get(n.id)
        v, mask = ops.dropout_forward(args[0], a["rate"], tape.mode, rng=tape.rng, mask=mask)
        tape.caches[n.id] = mask
        return v
    if op == "concat":
        return concat_channels(args)
    if op == "crop":
        return center_crop(args[0], a["margin"])
    if op == "softmax_xent":
        loss, grad = ops.softmax_xent(args[0], args[1])
        tape.caches[n.id] = grad
        return np.asarray(loss)
    raise InvalidSpec(f"cannot evaluate op {op!r}")


def backward(graph, tape, seeds=None, conv_method=None):
    """Reverse pass. Returns ``{param name: gradient}`` for every parameter.

    ``seeds`` maps output names to upstream gradients; by default every
    scalar ``softmax_xent`` output is seeded with 1.
    """
    if tape is None or not tape.done:
        raise BackwardBeforeForward("backward called without a recorded forward pass")
    vals = tape.values
    grads = {}
    if seeds is None:
        seeds = {name: 1.0 for name, i in graph.outputs.items()
                 if graph.nodes[i].op == "softmax_xent" and i in vals}
    for name, g in seeds.items():
        i = graph.outputs[name]
        grads[i] = np.asarray(g, dtype=vals[i].dtype) if np.ndim(g) else g

    def acc(i, g):
        if graph.nodes[i].op == "input":
            return
        if i in grads:
            grads[i] = grads[i] + g
        else:
            grads[i] = g

    for n in reversed(graph.nodes):
        if n.id not in grads or n.op in ("input", "param"):
            continue
        g = grads.pop(n.id)
        op = n.op
        if op == "conv3d":
            x = tape.caches[n.id]
            gx, gw, gb = conv.conv3d_backward(g, x, vals[n.inputs[1]], method=conv_method)
            acc(n.inputs[0], gx)
            acc(n.inputs[1], gw)
            acc(n.inputs[2], gb)
        elif op == "batchnorm":
            cache = tape.caches[n.id]
            if cache is None:
                raise BackwardBeforeForward("backward through infer-mode batchnorm")
            gx, gg, gb = ops.batchnorm_backward(g, cache)
            acc(n.inputs[0], gx)
            acc(n.inputs[1], gg)
            acc(n.inputs[2], gb)
        elif op == "prelu":
            gx, ga = ops.prelu_backward(g, tape.caches[n.id])
            acc(n.inputs[0], gx)
            acc(n.inputs[1], ga)
        elif op == "dropout":
            acc(n.inputs[0], ops.dropout_backward(g, tape.caches[n.id]))
        elif op == "concat":
            start = 0
            for i in n.inputs:
                c = vals[i].shape[1]
                acc(i, g[:, start:start + c])
                start += c
        elif op == "crop":
            m = n.attrs["margin"]
            src = vals[n.inputs[0]]
            if m == 0:
                acc(n.inputs[0], g)
            else:
                full = np.zeros_like(src)
                full[:, :, m:-m, m:-m, m:-m] = g
                acc(n.inputs[0], full)
        elif op == "softmax_xent":
            acc(n.inputs[0], tape.caches[n.id] * g)
        else:
            raise InvalidSpec(f"cannot differentiate op {op!r}")

    out = {}
    for name, pid in graph._param_nodes.items():
        g = grads.get(pid)
        out[name] = np.zeros_like(graph.params[name]) if g is None else g
    return out
