import numpy as np
import pytest

from hd3d.errors import BackwardBeforeForward, InvalidSpec, UnboundInput
from hd3d.graph import Graph, TapeState, backward, forward
from hd3d.netbuild import build, standard_spec
from hd3d.rng import Rng


def _identity_conv_graph():
    g = Graph()
    x = g.input("x")
    w = g.param("w", np.ones((1, 1, 1, 1, 1)))
    b = g.param("b", np.zeros(1))
    g.mark_output("y", g.add("conv3d", [x, w, b], kernel=1))
    return g


def test_identity_conv_reproduces_input():
    g = _identity_conv_graph()
    x = Rng(0).normal(27).reshape(1, 1, 3, 3, 3)
    assert np.array_equal(forward(g, {"x": x})["y"], x)


def test_unbound_input():
    with pytest.raises(UnboundInput):
        forward(_identity_conv_graph(), {}, outputs=["y"])


def test_backward_before_forward():
    g = _identity_conv_graph()
    with pytest.raises(BackwardBeforeForward):
        backward(g, TapeState())
    with pytest.raises(BackwardBeforeForward):
        backward(g, None)


def test_node_validation():
    g = Graph()
    with pytest.raises(InvalidSpec):
        g.add("maxpool")
    with pytest.raises(InvalidSpec):
        g.add("crop", [3], margin=1)
    x = g.input("x")
    with pytest.raises(InvalidSpec):
        g.add("conv3d", [x, x, x], kernel=2)
    with pytest.raises(InvalidSpec):
        g.add("dropout", [x], rate=1.0)
    with pytest.raises(InvalidSpec):
        g.param("p", np.zeros(1)) and g.param("p", np.zeros(1))


def test_disconnected_subgraphs_independent():
    g = Graph()
    outs = []
    for name in ("a", "b"):
        x = g.input(f"x_{name}")
        t = g.input(f"t_{name}", kind="labels")
        w = g.param(f"w_{name}", Rng(1, name).normal(4 * 2).reshape(4, 2, 1, 1, 1))
        b = g.param(f"b_{name}", np.zeros(4))
        c = g.add("conv3d", [x, w, b], kernel=1)
        outs.append(g.add("softmax_xent", [c, t]))
    g.mark_output("loss_a", outs[0])
    g.mark_output("loss_b", outs[1])
    r = Rng(2)
    feed = {"x_a": r.normal(16).reshape(1, 2, 2, 2, 2), "x_b": r.normal(16).reshape(1, 2, 2, 2, 2),
            "t_a": r.integers(4, 8).reshape(1, 2, 2, 2), "t_b": r.integers(4, 8).reshape(1, 2, 2, 2)}
    tape = TapeState()
    forward(g, feed, tape=tape)
    g1 = backward(g, tape, seeds={"loss_a": 1.0})
    feed2 = dict(feed, x_b=feed["x_b"] * 7 + 1)
    tape2 = TapeState()
    forward(g, feed2, tape=tape2)
    g2 = backward(g, tape2, seeds={"loss_a": 1.0})
    assert np.array_equal(g1["w_a"], g2["w_a"])
    assert not g1["w_b"].any() and not g2["w_b"].any()


def test_baseline_final_size_and_grads_for_every_param():
    net = build(standard_spec("baseline", width=0.2), seed=0)
    r = Rng(3)
    x = r.normal(2 * 27 ** 3).reshape(1, 2, 27, 27, 27).astype(np.float32)
    y = r.integers(4, 729).reshape(1, 9, 9, 9)
    loss, logits, grads = net.train_step_grads(x, y, Rng(4))
    assert logits.shape == (1, 4, 9, 9, 9)
    assert set(grads) == set(net.params)
    for k, v in grads.items():
        assert v.shape == net.params[k].shape


def test_forward_backward_deterministic():
    net = build(standard_spec("hyperdense", width=0.1), seed=0)
    r = Rng(5)
    x = r.normal(2 * 2 * 27 ** 3).reshape(2, 2, 27, 27, 27).astype(np.float32)
    y = r.integers(4, 2 * 729).reshape(2, 9, 9, 9)
    runs = []
    for _ in range(2):
        n = build(standard_spec("hyperdense", width=0.1), seed=0)
        runs.append(n.train_step_grads(x, y, Rng(6, "dropout")))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][2]:
        assert np.array_equal(runs[0][2][k], runs[1][2][k])


def test_intermediates_freed_without_tape():
    net = build(standard_spec("plain", width=0.2), seed=0)
    x = np.zeros((1, 2, 19, 19, 19), np.float32)
    tape = TapeState()
    forward(net.graph, net.feed(x), mode="infer", outputs=["logits"])
    # with a tape everything is retained for backward
    forward(net.graph, net.feed(x, np.zeros((1, 1, 1, 1), np.int64)), mode="infer", tape=tape,
            outputs=["logits"])
    assert len(tape.values) > 20
