"""Network specifications and their materialisation into graphs.

Three connectivity rules are supported:

``plain``
    each layer sees only the previous layer's output.
``dense``
    single path; each conv layer sees the outputs of every earlier layer and
    the raw (two-channel) input, and ``fully_conv_1`` sees every conv output.
    This is the fully-dense baseline.
``hyperdense``
    two paths, one per modality; from ``conv_2`` on, a layer in either path
    sees every earlier output of *both* paths plus both raw inputs.

Earlier maps are larger (valid convolutions shrink each axis by ``k - 1``),
so every skip source is centre-cropped to the consuming layer's input size.
Within a layer's input, sources are ordered newest first, stream 1 before
stream 2 at equal depth.
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvalidSpec
from .graph import Graph, TapeState, backward, forward
from .rng import Rng

CONV_KERNELS = [25, 25, 25, 50, 50, 50, 75, 75, 75]
FULLY_KERNELS = [400, 200, 150]
N_CLASSES = 4
MODALITIES = ("t1", "t2")
CONNECTIVITIES = ("plain", "dense", "hyperdense")
SPEC_VERSION = 1


@dataclass
class LayerSpec:
    name: str
    kernel: int
    kernels: int
    dropout: bool = False


@dataclass
class NetworkSpec:
    connectivity: str
    streams: int
    input_channels: int
    conv_layers: list
    fully_layers: list
    classifier: LayerSpec
    dropout_rate: float = 0.5
    cross_modal_first_layer: bool = False
    concat_order: str = "newest_first"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    prelu_init: float = 0.25

    def __post_init__(self):
        self.conv_layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l)
                            for l in self.conv_layers]
        self.fully_layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l)
                             for l in self.fully_layers]
        if not isinstance(self.classifier, LayerSpec):
            self.classifier = LayerSpec(**self.classifier)
        self.validate()

    def validate(self):
        if self.connectivity not in CONNECTIVITIES:
            raise InvalidSpec(f"unknown connectivity {self.connectivity!r}")
        if self.connectivity == "hyperdense" and self.streams != 2:
            raise InvalidSpec("hyperdense connectivity requires 2 streams")
        if self.connectivity != "hyperdense" and self.streams != 1:
            raise InvalidSpec(f"{self.connectivity} connectivity requires 1 stream")
        if self.streams * self.input_channels != len(MODALITIES):
            raise InvalidSpec(
                f"{self.streams} stream(s) x {self.input_channels} channel(s) "
                f"does not cover the {len(MODALITIES)} modalities")
        if not self.conv_layers:
            raise InvalidSpec("at least one conv layer is required")
        for l in self.layers:
            if l.kernels < 1:
                raise InvalidSpec(f"{l.name}: kernel count must be positive")
            if l.kernel < 1 or l.kernel % 2 == 0:
                raise InvalidSpec(f"{l.name}: kernel edge must be odd")
        for l in self.fully_layers + [self.classifier]:
            if l.kernel != 1:
                raise InvalidSpec(f"{l.name}: fully-conv layers use 1^3 kernels")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidSpec("dropout rate must lie in [0, 1)")
        if self.concat_order != "newest_first":
            raise InvalidSpec(f"unsupported concat order {self.concat_order!r}")

    @property
    def layers(self):
        return self.conv_layers + self.fully_layers + [self.classifier]

    @property
    def shrink(self):
        """Total per-axis size reduction of the network (18 for the defaults)."""
        return sum(l.kernel - 1 for l in self.conv_layers)

    def to_text(self):
        d = asdict(self)
        d["version"] = SPEC_VERSION
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_text(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidSpec(f"network spec is not valid JSON: {e}") from None
        if d.pop("version", None) != SPEC_VERSION:
            raise InvalidSpec("unsupported network spec version")
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidSpec(str(e)) from None


def standard_spec(arch="hyperdense", width=1.0, **overrides):
    """The standard layer stack under one of the connectivity rules.

    ``arch`` is ``hyperdense``, ``baseline`` (alias ``dense``) or ``plain``.
    ``width`` scales every kernel count except the 4-way classifier, which
    gives cheaper desk-scale variants of the same topology.
    """
    connectivity = {"baseline": "dense"}.get(arch, arch)
    if connectivity not in CONNECTIVITIES:
        raise InvalidSpec(f"unknown architecture {arch!r}")
    streams = 2 if connectivity == "hyperdense" else 1

    def w(n):
        return max(1, int(round(n * width)))

    conv = [LayerSpec(f"conv_{i + 1}", 3, w(n)) for i, n in enumerate(CONV_KERNELS)]
    fully = [LayerSpec(f"fully_conv_{i + 1}", 1, w(n), dropout=True)
             for i, n in enumerate(FULLY_KERNELS)]
    spec = NetworkSpec(connectivity=connectivity, streams=streams,
                       input_channels=len(MODALITIES) // streams,
                       conv_layers=conv, fully_layers=fully,
                       classifier=LayerSpec("classification", 1, N_CLASSES))
    return replace(spec, **overrides) if overrides else spec


# -- channel planning ---------------------------------------------------------

@dataclass
class Source:
    layer: int      # 0 = raw input, i = output of conv layer i
    stream: int     # 1-based
    channels: int
    margin: int


@dataclass
class LayerPlan:
    name: str
    index: int      # 1-based position in the full layer stack
    stream: int     # 0 for the shared fully-conv / classifier layers
    kernel: int
    in_channels: int
    out_channels: int
    sources: list = field(default_factory=list)
    preact: bool = True
    dropout: bool = False


@dataclass
class ChannelPlan:
    spec: NetworkSpec
    layers: list

    def conv_inputs(self, stream=1):
        return [lp.in_channels for lp in self.layers if lp.stream == stream]

    def layer(self, name, stream=0):
        for lp in self.layers:
            if lp.name == name and lp.stream == stream:
                return lp
        raise KeyError((name, stream))

    @property
    def fc1_inputs(self):
        return self.layers[len(self.layers) - len(self.spec.fully_layers) - 1].in_channels


def plan_channels(spec: NetworkSpec, previous_only=False) -> ChannelPlan:
    """Work out every layer's sources, crop margins and input channel count.

    ``previous_only`` keeps only the immediately preceding layer among each
    layer's sources; under that restriction ``dense`` reduces to ``plain``.
    """
    spec.validate()
    conv = spec.conv_layers
    n_conv = len(conv)
    # spatial reduction accumulated after layer i (index 0 = raw input)
    cum = [0]
    for l in conv:
        cum.append(cum[-1] + l.kernel - 1)
    streams = list(range(1, spec.streams + 1))

    def chans(k, t):
        return spec.input_channels if k == 0 else conv[k - 1].kernels

    def source(k, t, into):
        # `into` = index of the conv layer whose output size the source must match
        m = cum[into] - cum[k]
        assert m % 2 == 0
        return Source(k, t, chans(k, t), m // 2)

    layers = []
    for l in range(1, n_conv + 1):
        for s in streams:
            if spec.connectivity == "plain":
                srcs = [source(l - 1, s, l - 1)]
            elif spec.connectivity == "dense":
                srcs = [source(k, s, l - 1) for k in range(l - 1, -1, -1)]
            else:
                if l == 1:
                    srcs = ([source(0, t, 0) for t in streams]
                            if spec.cross_modal_first_layer else [source(0, s, 0)])
                else:
                    srcs = [source(k, t, l - 1) for k in range(l - 1, -1, -1) for t in streams]
            if previous_only:
                srcs = [x for x in srcs if x.layer == l - 1]
            ls = conv[l - 1]
            layers.append(LayerPlan(ls.name, l, s if spec.streams > 1 else 1, ls.kernel,
                                    sum(x.channels for x in srcs), ls.kernels, srcs,
                                    preact=l > 1, dropout=ls.dropout))

    # fully_conv_1 sees conv outputs only (never the raw inputs)
    if spec.connectivity == "plain":
        fc_src = [source(n_conv, t, n_conv) for t in streams]
    else:
        fc_src = [source(k, t, n_conv) for k in range(n_conv, 0, -1) for t in streams]
    if previous_only:
        fc_src = [x for x in fc_src if x.layer == n_conv]
    prev = sum(x.channels for x in fc_src)
    for j, ls in enumerate(spec.fully_layers + [spec.classifier]):
        idx = n_conv + 1 + j
        layers.append(LayerPlan(ls.name, idx, 0, ls.kernel, prev, ls.kernels,
                                fc_src if j == 0 else [], preact=True,
                                dropout=ls.dropout and spec.dropout_rate > 0))
        prev = ls.kernels
    return ChannelPlan(spec, layers)


# -- parameter initialisation -------------------------------------------------

def init_he(fan_in, shape, rng, dtype=np.float32):
    """Zero-mean Gaussian weights with standard deviation ``sqrt(2 / fan_in)``."""
    if fan_in < 1:
        raise InvalidSpec("fan_in must be >= 1")
    n = int(np.prod(shape))
    return (rng.normal(n) * math.sqrt(2.0 / fan_in)).reshape(shape).astype(dtype)


# -- graph construction -------------------------------------------------------

def _pname(lp):
    return f"{lp.name}.s{lp.stream}" if lp.stream else lp.name


class Network:
    """A built graph plus the spec and channel plan that produced it."""

    def __init__(self, spec, plan, graph, seed):
        self.spec = spec
        self.plan = plan
        self.graph = graph
        self.seed = seed

    @property
    def params(self):
        return self.graph.params

    @property
    def buffers(self):
        return self.graph.buffers

    def param_count(self):
        return int(sum(p.size for p in self.graph.params.values()))

    @property
    def dtype(self):
        return next(iter(self.graph.params.values())).dtype

    def feed(self, images, labels=None):
        """Map ``images`` (``[B, M, D, H, W]``, modality channels) to graph inputs."""
        feed = {name: images[:, i:i + 1] for i, name in enumerate(MODALITIES)}
        if labels is not None:
            feed["labels"] = labels
        return feed

    def logits(self, images, conv_method=None):
        out = forward(self.graph, self.feed(images), mode="infer",
                      outputs=["logits"], conv_method=conv_method)
        return out["logits"]

    def train_step_grads(self, images, labels, rng, conv_method=None):
        """Train-mode forward + backward on one batch.

        Returns ``(loss, logits, grads)``; batch-norm running stats update.
        """
        tape = TapeState()
        out = forward(self.graph, self.feed(images, labels), mode="train", tape=tape,
                      rng=rng, outputs=["loss", "logits"], conv_method=conv_method)
        grads = backward(self.graph, tape, conv_method=conv_method)
        return float(out["loss"]), out["logits"], grads


def build(spec: NetworkSpec, seed=0, dtype=np.float32, previous_only=False, init=True) -> Network:
    """Materialise ``spec``; ``init=False`` leaves weights at zero (shape queries)."""
    plan = plan_channels(spec, previous_only=previous_only)
    g = Graph()
    raw = [g.input(name) for name in MODALITIES]
    labels = g.input("labels", kind="labels")
    # value node per (layer, stream); raw inputs are layer 0
    if spec.streams == 1:
        x0 = g.add("concat", raw, name="input") if len(raw) > 1 else raw[0]
        values = {(0, 1): x0}
    else:
        values = {(0, s + 1): raw[s] for s in range(spec.streams)}
    crops = {}

    def fetch(src):
        key = (src.layer, src.stream, src.margin)
        if src.margin == 0:
            return values[(src.layer, src.stream)]
        if key not in crops:
            crops[key] = g.add("crop", [values[(src.layer, src.stream)]],
                               name=f"crop.l{src.layer}.s{src.stream}.m{src.margin}",
                               margin=src.margin)
        return crops[key]

    prev = None
    for lp in plan.layers:
        pn = _pname(lp)
        if lp.sources:
            ids = [fetch(s) for s in lp.sources]
            h = ids[0] if len(ids) == 1 else g.add("concat", ids, name=f"{pn}.concat")
        else:
            h = prev
        if lp.preact:
            c = lp.in_channels
            gam = g.param(f"{pn}.bn_gamma", np.ones(c, dtype))
            bet = g.param(f"{pn}.bn_beta", np.zeros(c, dtype))
            g.buffer(f"{pn}.bn_mean", np.zeros(c, dtype))
            g.buffer(f"{pn}.bn_var", np.ones(c, dtype))
            h = g.add("batchnorm", [h, gam, bet], name=f"{pn}.bn",
                      running=(f"{pn}.bn_mean", f"{pn}.bn_var"),
                      eps=spec.bn_eps, momentum=spec.bn_momentum)
            slope = g.param(f"{pn}.prelu", np.full(c, spec.prelu_init, dtype))
            h = g.add("prelu", [h, slope], name=f"{pn}.prelu")
        if lp.dropout:
            h = g.add("dropout", [h], name=f"{pn}.dropout", rate=spec.dropout_rate)
        k = lp.kernel
        wshape = (lp.out_channels, lp.in_channels, k, k, k)
        if init:
            wv = init_he(lp.in_channels * k ** 3, wshape, Rng(seed, "init", f"{pn}.weight"), dtype)
        else:
            wv = np.zeros(wshape, dtype)
        w = g.param(f"{pn}.weight", wv)
        b = g.param(f"{pn}.bias", np.zeros(lp.out_channels, dtype))
        h = g.add("conv3d", [h, w, b], name=f"{pn}.conv", kernel=k)
        g.mark_output(pn, h)
        if lp.stream:
            values[(lp.index, lp.stream)] = h
        prev = h
    g.mark_output("logits", prev)
    g.mark_output("loss", g.add("softmax_xent", [prev, labels], name="loss"))
    return Network(spec, plan, g, seed)
