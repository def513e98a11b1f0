"""Trainable spatial attention.

The module takes a convolutional volume (B, H, W, N), runs a small stack of
1x1 convolutions over it, then a per-position (unshared-weight) 1x1 layer
with a sigmoid to produce a single-channel soft mask in (0, 1). The volume
is reweighted by the mask, globally average-pooled, and the pooled vector is
divided by the per-item mask mean, so a spatially constant mask reproduces
plain GAP exactly. The per-position layer is zero-initialized: the initial
mask is uniform 0.5 and the module starts as a pass-through.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import graph
from .graph import Node, Parameter, ShapeError

MASK_MEAN_FLOOR = 1e-8


@dataclass(frozen=True)
class AttentionConfig:
    conv_widths: tuple = (32, 16)  # stacked 1x1 conv widths; final mask layer is fixed
    mask_floor: float = MASK_MEAN_FLOOR

    def __post_init__(self):
        if len(self.conv_widths) < 1 or any(w < 1 for w in self.conv_widths):
            raise ValueError(f"conv_widths must be a non-empty list of positive ints, got {self.conv_widths}")


@dataclass
class AttentionOutput:
    mask: Node  # (B, H, W, 1), values in (0, 1)
    masked: Node  # (B, H, W, N)
    features: Node  # (B, N): GAP(masked) / mean(mask)
    mask_mean: Node  # (B, 1)
    degenerate: bool = field(default=False)  # mask mean collapsed below the floor


class AttentionModule:
    """Attention subgraph bound to a fixed input volume shape (H, W, N)."""

    def __init__(self, input_hwc, config=None, rng=None, name="att"):
        h, w, n = input_hwc
        if n < 1:
            raise ShapeError(f"attention input must have at least one channel, got {n}")
        self.input_hwc = (h, w, n)
        self.config = config or AttentionConfig()
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)

        self.conv_weights = []
        self.conv_biases = []
        cin = n
        for i, width in enumerate(self.config.conv_widths):
            std = np.sqrt(2.0 / cin)
            self.conv_weights.append(Parameter(rng.normal(0.0, std, (1, 1, cin, width)), f"{name}/conv{i}/w"))
            self.conv_biases.append(Parameter(np.zeros(width), f"{name}/conv{i}/b"))
            cin = width
        # zero init: sigmoid(0) = 0.5 everywhere, so the module starts as GAP
        self.lc_weight = Parameter(np.zeros((h, w, cin)), f"{name}/mask/w")
        self.lc_bias = Parameter(np.zeros((h, w)), f"{name}/mask/b")

    @property
    def parameters(self):
        out = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out += [w, b]
        out += [self.lc_weight, self.lc_bias]
        return out

    @property
    def parameter_count(self):
        return sum(p.value.size for p in self.parameters)

    def forward(self, volume):
        if volume.value.shape[1:] != self.input_hwc:
            raise ShapeError(
                f"attention module built for volume {self.input_hwc}, got {volume.value.shape[1:]}"
            )
        t = volume
        for w, b in zip(self.conv_weights, self.conv_biases):
            t = graph.relu(graph.conv2d(t, w, b, stride=1, padding="same"))
        mask = graph.sigmoid(graph.locally_connected_1x1(t, self.lc_weight, self.lc_bias))
        masked = graph.mask_multiply(volume, mask)
        pooled = graph.gap(masked)
        mask_mean = graph.gap(mask)
        features = graph.normalize_by(pooled, mask_mean, floor=self.config.mask_floor)
        degenerate = bool((mask_mean.value < self.config.mask_floor).any())
        if degenerate:
            warnings.warn(f"attention mask collapsed below {self.config.mask_floor} in {self.name}", RuntimeWarning)
        return AttentionOutput(mask=mask, masked=masked, features=features, mask_mean=mask_mean, degenerate=degenerate)


class ClassifierHead:
    """Dense + softmax head producing class probabilities from a feature vector."""

    def __init__(self, in_features, classes, rng=None, name="head"):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_features + classes))
        self.weight = Parameter(rng.normal(0.0, std, (in_features, classes)), f"{name}/w")
        self.bias = Parameter(np.zeros(classes), f"{name}/b")

    @property
    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, features):
        logits = graph.dense(features, self.weight, self.bias)
        return logits, graph.softmax(logits)


class AttentionBranch:
    """Attention module plus its own softmax classification head."""

    def __init__(self, input_hwc, classes, config=None, rng=None, name="att0", with_head=True):
        self.name = name
        self.module = AttentionModule(input_hwc, config=config, rng=rng, name=name)
        self.head = ClassifierHead(input_hwc[2], classes, rng=rng, name=f"{name}/head") if with_head else None

    @property
    def parameters(self):
        params = list(self.module.parameters)
        if self.head is not None:
            params += self.head.parameters
        return params

    def forward(self, volume):
        out = self.module.forward(volume)
        if self.head is None:
            return out, None, None
        logits, probs = self.head.forward(out.features)
        return out, logits, probs


def upsample_nearest(mask, target_hw):
    """Nearest-neighbor upsampling of a 2-D map to (H, W)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    th, tw = target_hw
    rows = (np.arange(th) * mask.shape[0]) // th
    cols = (np.arange(tw) * mask.shape[1]) // tw
    return mask[np.ix_(rows, cols)]


def export_mask(mask, out_dir, *, branch, epoch, sample_id, image_hw=None):
    """Write a mask as an 8-bit PGM, a raw-float CSV and, optionally, a
    nearest-neighbor upsampled PGM at the input resolution.

    Filenames encode the branch name, epoch and sample id. Returns the paths
    written.
    """
    import os

    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise ShapeError(f"export_mask expects a 2-D mask, got shape {mask.shape}")
    os.makedirs(out_dir, exist_ok=True)
    stem = f"{branch}_e{int(epoch):03d}_{sample_id}"
    paths = []

    pgm_path = os.path.join(out_dir, stem + ".pgm")
    _write_pgm(pgm_path, mask)
    paths.append(pgm_path)

    csv_path = os.path.join(out_dir, stem + ".csv")
    np.savetxt(csv_path, mask, delimiter=",", fmt="%.17g")
    paths.append(csv_path)

    if image_hw is not None:
        up_path = os.path.join(out_dir, stem + "_up.pgm")
        _write_pgm(up_path, upsample_nearest(mask, image_hw))
        paths.append(up_path)
    return paths


def _write_pgm(path, img):
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_mask_csv(path):
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return arr.astype(np.float64)
