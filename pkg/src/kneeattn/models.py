"""Backbone builders and branch/fusion wiring.

Four backbones are available, each described as a declarative layer list:

* ``antony-clsf``: 4 conv/pool stages (32/64/96/128 kernels, 11/5/3/3)
* ``antony-ext``: the doubled-conv variant of the same stack
* ``vgg16``: the standard 5-block 64/128/256/512/512 layout, truncated
  after the fifth pool (no dense layers; classification flows only through
  attention branches)
* ``resnet50``: bottleneck blocks 3/4/6/3 with stride-2 leading 1x1 convs
  and projection shortcuts

Convolutions use SAME padding and pools use VALID padding throughout; this
is the only combination that reproduces the published per-layer output
shapes of the Antony stacks (e.g. 200 -> 100 under a stride-2 conv and
100 -> 49 under a 3x3/2 pool). Attention branches tap named pooling/block
outputs (att0/att1/att2, shallow to deep).

A width multiplier shrinks every channel count for desk-scale runs; shape
conformance is only claimed at multiplier 1.0.
"""

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph
from .attention import AttentionBranch, AttentionConfig, ClassifierHead
from .graph import Parameter, ShapeError
from .kernels import conv2d_out_hw

BACKBONES = ("antony-clsf", "antony-ext", "resnet50", "vgg16")
FUSIONS = ("none", "early-fusion", "multi-loss")


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    channels: int
    stride: int = 1
    padding: str = "same"


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class BottleneckSpec:
    mid: int
    out: int
    stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "vgg16"
    input_hw: tuple = (320, 224)
    in_channels: int = 1
    classes: int = 5
    width_mult: float = 1.0
    branches: tuple = ("att0", "att1")
    fusion: str = "multi-loss"
    loss_weights: tuple = (1.0, 0.8)  # multi-loss only; one weight per branch, in [0, 1]
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0

    def with_weights(self, weights):
        return replace(self, loss_weights=tuple(float(w) for w in weights))


def _scaled(c, mult):
    return max(1, int(round(c * mult)))


def backbone_layers(backbone, width_mult=1.0):
    """(ordered layer list, tap name -> layer name) for a backbone id."""
    s = lambda c: _scaled(c, width_mult)
    if backbone == "antony-clsf":
        layers = [
            ("conv1", ConvSpec(11, s(32), 2)),
            ("pool1", PoolSpec(3, 2)),
            ("conv2", ConvSpec(5, s(64))),
            ("pool2", PoolSpec(3, 2)),
            ("conv3", ConvSpec(3, s(96))),
            ("pool3", PoolSpec(3, 2)),
            ("conv4", ConvSpec(3, s(128))),
            ("pool4", PoolSpec(3, 2)),
        ]
        taps = {"att0": "pool2", "att1": "pool3", "att2": "pool4"}
    elif backbone == "antony-ext":
        layers = [
            ("conv1", ConvSpec(11, s(32), 2)),
            ("pool1", PoolSpec(3, 2)),
            ("conv2-1", ConvSpec(3, s(64))),
            ("conv2-2", ConvSpec(3, s(64))),
            ("pool2", PoolSpec(3, 2)),
            ("conv3-1", ConvSpec(3, s(96))),
            ("conv3-2", ConvSpec(3, s(96))),
            ("pool3", PoolSpec(3, 2)),
            ("conv4-1", ConvSpec(3, s(128))),
            ("conv4-2", ConvSpec(3, s(128))),
            ("pool4", PoolSpec(3, 2)),
        ]
        taps = {"att0": "pool2", "att1": "pool3", "att2": "pool4"}
    elif backbone == "vgg16":
        layers = []
        for block, (channels, convs) in enumerate([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)], start=1):
            for i in range(1, convs + 1):
                layers.append((f"conv{block}_{i}", ConvSpec(3, s(channels))))
            layers.append((f"pool{block}", PoolSpec(2, 2)))
        taps = {"att0": "pool3", "att1": "pool4", "att2": "pool5"}
    elif backbone == "resnet50":
        layers = [("conv1", ConvSpec(7, s(64), 2)), ("pool1", PoolSpec(3, 2))]
        stages = [  # (stage index, mid channels, out channels, block count, first stride)
            (2, 64, 256, 3, 1),
            (3, 128, 512, 4, 2),
            (4, 256, 1024, 6, 2),
            (5, 512, 2048, 3, 2),
        ]
        for stage, mid, out, count, stride in stages:
            for i in range(1, count + 1):
                layers.append((f"conv{stage}_{i}", BottleneckSpec(s(mid), s(out), stride if i == 1 else 1)))
        taps = {"att0": "conv3_4", "att1": "conv4_6", "att2": "conv5_3"}
    else:
        raise ValueError(f"unknown backbone {backbone!r} (supported: {', '.join(BACKBONES)})")
    return layers, taps


def infer_backbone_shapes(spec):
    """Output shape (h, w, c) after every layer of the full stack, by formula."""
    layers, _ = backbone_layers(spec.backbone, spec.width_mult)
    return infer_shapes_for_layers(layers, spec.input_hw, spec.in_channels)


def infer_shapes_for_layers(layers, input_hw, in_channels):
    h, w = input_hw
    c = in_channels
    shapes = OrderedDict()
    for name, layer in layers:
        if isinstance(layer, ConvSpec):
            h, w = conv2d_out_hw(h, w, layer.kernel, layer.stride, layer.padding == "same")
            c = layer.channels
        elif isinstance(layer, PoolSpec):
            if layer.kernel > h or layer.kernel > w:
                raise ShapeError(f"{name}: pool window {layer.kernel} larger than {h}x{w}")
            h, w = conv2d_out_hw(h, w, layer.kernel, layer.stride, False)
        else:  # bottleneck: spatial change happens in the stride-2 leading conv
            h, w = conv2d_out_hw(h, w, 1, layer.stride, True)
            c = layer.out
        shapes[name] = (h, w, c)
    return shapes


def validate_spec(spec):
    if spec.backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {spec.backbone!r} (supported: {', '.join(BACKBONES)})")
    if spec.fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {spec.fusion!r} (supported: {', '.join(FUSIONS)})")
    _, taps = backbone_layers(spec.backbone, spec.width_mult)
    if len(set(spec.branches)) != len(spec.branches):
        raise ValueError(f"duplicate branch attach points: {spec.branches}")
    for b in spec.branches:
        if b not in taps:
            raise ValueError(f"attach point {b!r} not in backbone {spec.backbone} (taps: {sorted(taps)})")
    if not spec.branches:
        raise ValueError("a model with no attention branches has no classifier head; attach at least one branch")
    if spec.fusion == "none" and len(spec.branches) != 1:
        raise ValueError("fusion 'none' trains a single branch; use early-fusion or multi-loss for several")
    if spec.fusion == "early-fusion" and len(spec.branches) < 2:
        raise ValueError("early fusion needs at least two branches to concatenate")
    if spec.fusion == "multi-loss":
        weights = spec.loss_weights
        if weights is None or len(weights) != len(spec.branches):
            raise ValueError(
                f"multi-loss needs one weight per branch: {len(spec.branches)} branches, got {weights}"
            )
        for w in weights:
            # 0 is allowed and gates the branch out of training entirely
            if not (0.0 <= w <= 1.0):
                raise ValueError(f"loss weights must lie in [0, 1], got {w}")
    if not (0.0 < spec.width_mult <= 1.0):
        raise ValueError(f"width multiplier must be in (0, 1], got {spec.width_mult}")


@dataclass
class BranchResult:
    attention: object  # AttentionOutput
    logits: object  # Node or None (early fusion has no per-branch head)
    probs: object


@dataclass
class ForwardResult:
    branches: OrderedDict  # name -> BranchResult
    fused_logits: object = None
    fused_probs: object = None


class BuiltModel:
    """A backbone with attention branches, ready for forward passes.

    Parameters persist across forward calls; each call builds a fresh graph
    referencing them.
    """

    def __init__(self, spec):
        validate_spec(spec)
        self.spec = spec
        layers, self.taps = backbone_layers(spec.backbone, spec.width_mult)
        # layers below the deepest attached tap carry no gradient and are
        # never built; classification flows only through the branches
        names = [n for n, _ in layers]
        deepest = max(names.index(self.taps[b]) for b in spec.branches)
        self.layers = layers[: deepest + 1]
        self.shapes = infer_shapes_for_layers(self.layers, spec.input_hw, spec.in_channels)
        rng = np.random.default_rng(spec.seed)

        self.params = OrderedDict()
        self._layer_params = {}
        cin = spec.in_channels
        for name, layer in self.layers:
            if isinstance(layer, ConvSpec):
                self._layer_params[name] = self._make_conv(rng, name, layer.kernel, cin, layer.channels)
                cin = layer.channels
            elif isinstance(layer, BottleneckSpec):
                self._layer_params[name] = self._make_bottleneck(rng, name, cin, layer)
                cin = layer.out
        del cin

        branch_order = sorted(spec.branches, key=lambda b: list(self.taps).index(b))
        with_head = spec.fusion != "early-fusion"
        self.branches = OrderedDict()
        for bname in branch_order:
            hwc = self.shapes[self.taps[bname]]
            branch = AttentionBranch(hwc, spec.classes, spec.attention, rng, name=bname, with_head=with_head)
            self.branches[bname] = branch
            for p in branch.parameters:
                self.params[p.name] = p

        self.fused_head = None
        if spec.fusion == "early-fusion":
            width = sum(self.shapes[self.taps[b]][2] for b in branch_order)
            self.fused_head = ClassifierHead(width, spec.classes, rng, name="fused")
            for p in self.fused_head.parameters:
                self.params[p.name] = p

    # -- parameter construction -------------------------------------------

    def _register(self, param):
        self.params[param.name] = param
        return param

    def _make_conv(self, rng, name, k, cin, cout):
        std = np.sqrt(2.0 / (k * k * cin))
        w = self._register(Parameter(rng.normal(0.0, std, (k, k, cin, cout)), f"{name}/w"))
        b = self._register(Parameter(np.zeros(cout), f"{name}/b"))
        return {"w": w, "b": b}

    def _make_bottleneck(self, rng, name, cin, spec):
        parts = {
            "a": self._make_conv(rng, f"{name}/a", 1, cin, spec.mid),
            "b": self._make_conv(rng, f"{name}/b", 3, spec.mid, spec.mid),
            "c": self._make_conv(rng, f"{name}/c", 1, spec.mid, spec.out),
        }
        if cin != spec.out or spec.stride != 1:
            parts["proj"] = self._make_conv(rng, f"{name}/proj", 1, cin, spec.out)
        return parts

    # -- forward ------------------------------------------------------------

    def forward(self, images):
        """Run the network on a (B, H, W, C) float array."""
        x = graph.constant(images, name="images")
        if x.value.shape[1:] != (*self.spec.input_hw, self.spec.in_channels):
            raise ShapeError(
                f"model expects input {(*self.spec.input_hw, self.spec.in_channels)}, got {x.value.shape[1:]}"
            )
        tap_nodes = {}
        for name, layer in self.layers:
            if isinstance(layer, ConvSpec):
                p = self._layer_params[name]
                x = graph.relu(graph.conv2d(x, p["w"], p["b"], stride=layer.stride, padding=layer.padding))
            elif isinstance(layer, PoolSpec):
                x = graph.maxpool2d(x, layer.kernel, layer.stride)
            else:
                x = self._bottleneck_forward(name, layer, x)
            for att, lname in self.taps.items():
                if lname == name:
                    tap_nodes[att] = x

        branches = OrderedDict()
        feature_nodes = []
        for bname, branch in self.branches.items():
            out, logits, probs = branch.forward(tap_nodes[bname])
            branches[bname] = BranchResult(attention=out, logits=logits, probs=probs)
            feature_nodes.append(out.features)

        fused_logits = fused_probs = None
        if self.fused_head is not None:
            fused_logits, fused_probs = self.fused_head.forward(graph.concat_features(feature_nodes))
        return ForwardResult(branches=branches, fused_logits=fused_logits, fused_probs=fused_probs)

    def _bottleneck_forward(self, name, spec, x):
        p = self._layer_params[name]
        t = graph.relu(graph.conv2d(x, p["a"]["w"], p["a"]["b"], stride=spec.stride, padding="same"))
        t = graph.relu(graph.conv2d(t, p["b"]["w"], p["b"]["b"], stride=1, padding="same"))
        t = graph.conv2d(t, p["c"]["w"], p["c"]["b"], stride=1, padding="same")
        if "proj" in p:
            shortcut = graph.conv2d(x, p["proj"]["w"], p["proj"]["b"], stride=spec.stride, padding="same")
        else:
            shortcut = x
        return graph.relu(graph.add(t, shortcut))

    # -- bookkeeping ----------------------------------------------------------

    @property
    def parameter_count(self):
        return sum(p.value.size for p in self.params.values())

    def state(self):
        return OrderedDict((name, p.value) for name, p in self.params.items())

    def load_state(self, state):
        missing = [n for n in self.params if n not in state]
        extra = [n for n in state if n not in self.params]
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint has {arr.shape}, model expects {p.value.shape}"
                )
            p.value = np.ascontiguousarray(arr)

    def branch_names(self):
        return list(self.branches)


def build_model(spec):
    return BuiltModel(spec)


def combine_losses(losses, weights):
    """Global loss as the weighted linear combination of per-branch losses.

    A zero weight gates its branch out: its parameters receive identically
    zero gradient.
    """
    losses = list(losses)
    if len(losses) != len(weights):
        raise ShapeError(f"got {len(losses)} branch losses but {len(weights)} weights")
    for w in weights:
        if not (0.0 <= float(w) <= 1.0):
            raise ValueError(f"loss weights must lie in [0, 1], got {w}")
    return graph.weighted_sum(losses, weights)
