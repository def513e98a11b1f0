"""Reverse-mode automatic differentiation over dense float64 arrays.

Conventions, enforced everywhere:

* image-like values are laid out (batch, height, width, channels); feature
  vectors are (batch, features); losses are 0-d scalars
* all values are float64 and C-contiguous
* convolutions use SAME or VALID padding (see kernels); pooling is VALID
* a graph is built per forward pass; ``Parameter`` nodes persist across
  passes and accumulate gradients until explicitly zeroed

Forward/backward on one graph is single-threaded. Node values are never
mutated after creation (parameters are replaced, not edited, by the
optimizer), so they are safe to share across threads.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The computation graph is malformed (e.g. contains a cycle)."""


def as_tensor(x, name="tensor"):
    """Coerce to a float64 C-contiguous array, rejecting zero extents."""
    arr = np.asarray(x, dtype=np.float64, order="C")  # keeps 0-d scalars 0-d
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 0 and min(arr.shape) < 1:
        raise ShapeError(f"{name} has a zero extent: shape {arr.shape}")
    return arr


class Node:
    """A vertex of the computation graph.

    Holds the forward value and, after ``backward()`` has run from a scalar
    loss, the gradient of that loss with respect to this node. Nodes consumed
    by several downstream ops receive the sum of all incoming gradients.
    """

    __slots__ = ("value", "grad", "parents", "op", "name", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", name=None, requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-accumulate gradients from this scalar node."""
        if self.value.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.value.shape}")
        order = _topo_order(self)
        self.accumulate(np.array(1.0))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None and node.requires_grad:
                node._backward(node.grad)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Parameter(Node):
    """A trainable leaf with a persistent value and accumulated gradient."""

    def __init__(self, value, name):
        super().__init__(as_tensor(value, name), op="param", name=name, requires_grad=True)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


def _topo_order(root):
    """Iterative DFS topological order with cycle detection."""
    order = []
    state = {}  # id -> 1 while on stack, 2 when finished
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            state[id(node)] = 2
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[id(node)] = 1
        stack.append((node, True))
        for p in node.parents:
            if state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def constant(x, name=None):
    return Node(as_tensor(x, name or "constant"), op="const", name=name, requires_grad=False)


def _check_4d(x, who):
    if x.value.ndim != 4:
        raise ShapeError(f"{who} expects a (batch, height, width, channels) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# layer primitives


def conv2d(x, w, b, stride=1, padding="same"):
    """2-D cross-correlation plus bias.

    ``w`` is (k, k, in_channels, out_channels), ``b`` is (out_channels,).
    SAME padding gives ceil(size/stride) outputs, VALID gives
    floor((size-k)/stride)+1.
    """
    _check_4d(x, "conv2d")
    if w.value.ndim != 4 or w.value.shape[0] != w.value.shape[1]:
        raise ShapeError(f"conv2d weights must be (k, k, cin, cout), got {w.shape}")
    k, _, cin, cout = w.value.shape
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1 or k < 1:
        raise ShapeError(f"conv2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    bsz, h, width, xc = x.value.shape
    if xc != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {xc} channels, weights expect {cin}")
    if b.value.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    if padding == "valid" and (k > h or k > width):
        raise ShapeError(f"conv2d VALID kernel {k}x{k} larger than input {h}x{width}")

    same = padding == "same"
    y = kernels.conv2d_forward(x.value, w.value, b.value, stride, same)
    out = Node(y, (x, w, b), op="conv2d")

    def grad_fn(g):
        gx, gw, gb = kernels.conv2d_backward(x.value, w.value, np.ascontiguousarray(g), stride, same)
        if x.requires_grad:
            x.accumulate(gx)
        if w.requires_grad:
            w.accumulate(gw)
        if b.requires_grad:
            b.accumulate(gb)

    out._backward = grad_fn
    return out


def maxpool2d(x, k, stride):
    """VALID max pooling; gradient routes to the first maximum of each window."""
    _check_4d(x, "maxpool2d")
    _, h, w, _ = x.value.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d window {k}x{k} larger than input {h}x{w}")
    y, arg = kernels.maxpool2d_forward(x.value, k, stride)
    out = Node(y, (x,), op="maxpool2d")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(kernels.maxpool2d_backward(np.ascontiguousarray(g), arg, x.value.shape, k, stride))

    out._backward = grad_fn
    return out


def dense(x, w, b):
    """Affine map rows @ w + b for (batch, features) inputs."""
    if x.value.ndim != 2:
        raise ShapeError(f"dense expects a (batch, features) input, got shape {x.shape}")
    f_in, units = w.value.shape
    if x.value.shape[1] != f_in:
        raise ShapeError(f"dense feature mismatch: input has {x.value.shape[1]} features, weights expect {f_in}")
    if b.value.shape != (units,):
        raise ShapeError(f"dense bias must have shape ({units},), got {b.shape}")
    out = Node(x.value @ w.value + b.value, (x, w, b), op="dense")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(g @ w.value.T)
        if w.requires_grad:
            w.accumulate(x.value.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    out._backward = grad_fn
    return out


def locally_connected_1x1(x, w, b):
    """Per-position inner product over channels with unshared weights.

    ``w`` is (H, W, C), ``b`` is (H, W); output is (B, H, W, 1) with no
    activation applied.
    """
    _check_4d(x, "locally_connected_1x1")
    _, h, width, c = x.value.shape
    if w.value.shape != (h, width, c):
        raise ShapeError(
            f"locally connected weights must match the input grid: got {w.shape}, input is {(h, width, c)}"
        )
    if b.value.shape != (h, width):
        raise ShapeError(f"locally connected bias must be ({h}, {width}), got {b.shape}")
    y = np.einsum("bhwc,hwc->bhw", x.value, w.value) + b.value
    out = Node(np.ascontiguousarray(y[..., None]), (x, w, b), op="lc1x1")

    def grad_fn(g):
        g2 = g[..., 0]
        if x.requires_grad:
            x.accumulate(g2[..., None] * w.value)
        if w.requires_grad:
            w.accumulate(np.einsum("bhw,bhwc->hwc", g2, x.value))
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    out._backward = grad_fn
    return out


def relu(x):
    out = Node(np.maximum(x.value, 0.0), (x,), op="relu")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(g * (x.value > 0))

    out._backward = grad_fn
    return out


def sigmoid(x):
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    out = Node(y, (x,), op="sigmoid")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(g * y * (1.0 - y))

    out._backward = grad_fn
    return out


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = Node(y, (x,), op="softmax")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate((g - (g * y).sum(axis=-1, keepdims=True)) * y)

    out._backward = grad_fn
    return out


def gap(x):
    """Global average pooling: per-channel spatial mean, (B,H,W,C) -> (B,C)."""
    _check_4d(x, "gap")
    _, h, w, _ = x.value.shape
    out = Node(x.value.mean(axis=(1, 2)), (x,), op="gap")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.value.shape))

    out._backward = grad_fn
    return out


def mask_multiply(volume, mask):
    """Broadcast a (B,H,W,1) mask across all channels of a (B,H,W,C) volume."""
    _check_4d(volume, "mask_multiply volume")
    _check_4d(mask, "mask_multiply mask")
    if mask.value.shape[3] != 1:
        raise ShapeError(f"mask must have a single channel, got {mask.value.shape[3]}")
    if volume.value.shape[:3] != mask.value.shape[:3]:
        raise ShapeError(
            f"mask spatial extents {mask.value.shape[:3]} do not match volume {volume.value.shape[:3]}"
        )
    out = Node(volume.value * mask.value, (volume, mask), op="mask_mul")

    def grad_fn(g):
        if volume.requires_grad:
            volume.accumulate(g * mask.value)
        if mask.requires_grad:
            mask.accumulate((g * volume.value).sum(axis=3, keepdims=True))

    out._backward = grad_fn
    return out


def concat_features(nodes):
    """Order-preserving concatenation of (batch, features) vectors."""
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat_features needs at least one input")
    bsz = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.ndim != 2:
            raise ShapeError(f"concat_features expects (batch, features) inputs, got shape {n.shape}")
        if n.value.shape[0] != bsz:
            raise ShapeError(f"concat_features batch mismatch: {n.value.shape[0]} vs {bsz}")
    widths = [n.value.shape[1] for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes), op="concat")

    def grad_fn(g):
        start = 0
        for n, width in zip(nodes, widths):
            if n.requires_grad:
                n.accumulate(g[:, start : start + width])
            start += width

    out._backward = grad_fn
    return out


def add(a, b):
    """Elementwise sum of two same-shape nodes (residual connections)."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Node(a.value + b.value, (a, b), op="add")

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    out._backward = grad_fn
    return out


def scale(x, c):
    """Multiply by a python float constant."""
    c = float(c)
    out = Node(x.value * c, (x,), op="scale")

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate(g * c)

    out._backward = grad_fn
    return out


def weighted_sum(nodes, weights):
    """Linear combination of scalar nodes with float weights."""
    nodes = list(nodes)
    weights = [float(w) for w in weights]
    if len(nodes) != len(weights):
        raise ShapeError(f"weighted_sum got {len(nodes)} nodes but {len(weights)} weights")
    for n in nodes:
        if n.value.shape != ():
            raise ShapeError(f"weighted_sum expects scalar nodes, got shape {n.shape}")
    value = np.array(sum(w * n.value for n, w in zip(nodes, weights)))
    out = Node(value, tuple(nodes), op="wsum")

    def grad_fn(g):
        for n, w in zip(nodes, weights):
            if n.requires_grad:
                n.accumulate(g * w)

    out._backward = grad_fn
    return out


def normalize_by(num, denom, floor=1e-8):
    """Divide (B, F) features by a per-item (B, 1) denominator.

    The denominator is clamped below at ``floor``; where the clamp is active
    no gradient flows into it.
    """
    if num.value.ndim != 2 or denom.value.shape != (num.value.shape[0], 1):
        raise ShapeError(
            f"normalize_by expects (B, F) / (B, 1), got {num.shape} / {denom.shape}"
        )
    d = np.maximum(denom.value, floor)
    out = Node(num.value / d, (num, denom), op="normalize")

    def grad_fn(g):
        if num.requires_grad:
            num.accumulate(g / d)
        if denom.requires_grad:
            gd = -(g * num.value).sum(axis=1, keepdims=True) / (d * d)
            denom.accumulate(np.where(denom.value > floor, gd, 0.0))

    out._backward = grad_fn
    return out


LOG_CLAMP = 1e-12


def cross_entropy(probs, onehot):
    """Mean over the batch of -log p at the true class.

    ``probs`` rows must sum to 1 (each row is checked to 1e-6); ``onehot`` is
    a constant array with exactly one 1.0 per row. The log is clamped at
    1e-12 so degenerate predictions give a large finite loss.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    p = probs.value
    if p.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) probabilities, got {probs.shape}")
    if onehot.shape != p.shape:
        raise ShapeError(f"cross_entropy target shape {onehot.shape} does not match probs {p.shape}")
    if not np.all((onehot == 0.0) | (onehot == 1.0)) or not np.all(onehot.sum(axis=1) == 1.0):
        raise ValueError("cross_entropy targets must be one-hot rows (exactly one 1.0, rest 0.0)")
    row_sums = p.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > 1e-6
    if bad.any():
        raise ValueError(f"cross_entropy probability row {int(np.argmax(bad))} sums to {row_sums[bad][0]!r}, not 1")

    bsz = p.shape[0]
    pc = np.maximum(p, LOG_CLAMP)
    value = np.array(-(onehot * np.log(pc)).sum(axis=1).mean())
    out = Node(value, (probs,), op="cross_entropy")

    def grad_fn(g):
        if probs.requires_grad:
            gp = np.where(p >= LOG_CLAMP, -onehot / pc, 0.0) * (float(g) / bsz)
            probs.accumulate(gp)

    out._backward = grad_fn
    return out


def zero_grads(params):
    for p in params:
        p.zero_grad()
