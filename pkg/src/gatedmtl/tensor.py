"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a plain function that computes its output
with numpy and, when any input requires a gradient, records a closure that
maps the output gradient to input gradients.  ``backward`` walks the recorded
graph once in reverse topological order.

Contractions (``matmul``, ``conv2d``, ``channel_mix``) report the number of
scalar multiplies they execute to any active :func:`count_macs` context, which
is what the FLOP oracle uses.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


_grad_enabled = True
_mac_counters: list[list[int]] = []
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Collect multiply counts from contractions executed inside the block.

    Yields a one-element list whose entry is the running total.
    """
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def add_macs(n: int) -> None:
    for box in _mac_counters:
        box[0] += int(n)


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode autodiff needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out._op = op
    out._id = next(_node_ids)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, so a leaf used in
    several places (or across several calls) sums its contributions.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (with broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=DTYPE)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(np.asarray(x.data, dtype=DTYPE))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw, "sigmoid")


def maximum(x: Tensor, c: float) -> Tensor:
    """max(x, c) against a constant; the hinge primitive.

    The subgradient at x == c is taken as 0.
    """
    active = x.data > c

    def bw(g):
        return (g * active,)

    return _make(np.where(active, x.data, float(c)), (x,), bw, "maximum")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)

    def bw(g):
        return (g * sgn,)

    return _make(np.abs(x.data), (x,), bw, "abs")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def ste_threshold(s: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard threshold ``s > threshold`` with an identity backward pass.

    Exact ties map to 0.  The forward output is exactly 0.0 or 1.0.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    out = (s.data > threshold).astype(DTYPE)

    def bw(g):
        return (g,)

    return _make(out, (s,), bw, "ste_threshold")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatters with ``np.add.at``."""
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"index {index!r} invalid for shape {x.shape}") from exc

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (x,), bw, "take")


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, a batched left operand against a 2-D right
    operand, or two operands sharing identical leading batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} @ {b.shape}")
    out = a.data @ b.data
    add_macs(out.size * a.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix with rows (b, h, w) and columns (i, j, c), channels last."""
    p = k // 2
    B, C, H, W = x.shape
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C))
    xp[:, p:p + H, p:p + W, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero "same"-padded 2-D convolution (cross-correlation).

    x: [B, C_in, H, W]; w: [C_out, C_in, k, k] with odd k; b: [C_out].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Ci, k, k2 = w.shape
    if Ci != C or k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({O},)")
    cols = _im2col(x.data, k)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wmat.T
    add_macs(out.size * wmat.shape[1])
    if b is not None:
        out += b.data
    out = out.reshape(B, H, W, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)
    p = k // 2

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, O)
        gw = (gf.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gf @ wmat).reshape(B, H, W, k, k, C)
            gxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gf.sum(axis=0),)
        return grads

    return _make(out, parents, bw, "conv2d")


def channel_mix(weights: Tensor, feats: Sequence[Tensor], channel_axis: int = 1) -> Tensor:
    """Per-channel convex-combination primitive: sum_t weights[c, t] * feats[t][..., c, ...].

    Accumulates left to right over t.  Counts T multiplies per output element.
    """
    T = len(feats)
    if weights.ndim != 2 or weights.shape[1] != T:
        raise DimensionError(f"channel_mix: weights {weights.shape} vs {T} feature maps")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise DimensionError("channel_mix: feature maps differ in shape")
    ax = channel_axis % len(shape)
    C = shape[ax]
    if weights.shape[0] != C:
        raise DimensionError(f"channel_mix: {weights.shape[0]} weight rows for {C} channels")
    bshape = [1] * len(shape)
    bshape[ax] = C
    cols = [weights.data[:, t].reshape(bshape) for t in range(T)]
    out = cols[0] * feats[0].data
    for t in range(1, T):
        out = out + cols[t] * feats[t].data
    add_macs(T * out.size)
    other = tuple(i for i in range(len(shape)) if i != ax)

    def bw(g):
        gw = np.stack([(g * f.data).sum(axis=other) for f in feats], axis=1)
        return (gw,) + tuple(g * cols[t] for t in range(T))

    return _make(out, (weights,) + tuple(feats), bw, "channel_mix")


# ---------------------------------------------------------------------------
# neural-network primitives


def gate_mix(mask: Tensor, task: Tensor, shared: Tensor) -> Tensor:
    """``mask * task + (1 - mask) * shared`` with the mask broadcast against
    the feature maps.

    For an exactly binary mask the forward is a per-element select, so every
    output element is bitwise one of its two sources.
    """
    if task.shape != shared.shape:
        raise DimensionError(f"gate_mix: task {task.shape} vs shared {shared.shape}")
    try:
        np.broadcast_shapes(mask.shape, task.shape)
    except ValueError as exc:
        raise DimensionError(f"gate_mix: mask {mask.shape} vs features {task.shape}") from exc
    m = mask.data
    if np.all((m == 0.0) | (m == 1.0)):
        out = np.where(m == 1.0, task.data, shared.data)
    else:
        out = m * task.data + (1.0 - m) * shared.data

    def bw(g):
        return (_unbroadcast(g * (task.data - shared.data), mask.shape),
                _unbroadcast(g * m, task.shape),
                _unbroadcast(g * (1.0 - m), shared.shape))

    return _make(out, (mask, task, shared), bw, "gate_mix")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on [B, C, H, W] (H, W even)."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2d needs even spatial extents, got {x.shape}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw, "avg_pool2d")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an elementwise affine map."""
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: affine params {gain.shape}, {bias.shape} for width {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [B, K] logits against integer labels."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), y].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), y] -= 1.0
        return (g * p / B,)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.data - t

    def bw(g):
        return (g * np.sign(diff) / diff.size,)

    return _make(np.array(np.abs(diff).mean()), (pred,), bw, "l1_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error."""
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.data - t

    def bw(g):
        return (g * 2.0 * diff / diff.size,)

    return _make(np.array((diff * diff).mean()), (pred,), bw, "mse_loss")
