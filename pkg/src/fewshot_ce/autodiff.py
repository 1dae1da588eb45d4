"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Only the operations the channel-estimation models need are provided. Every op
accepts optional leading batch axes; the trailing axes follow the documented
per-sample layout (channels first for convolutions).

Usage::

    tape = GradientTape()
    w = tape.watch(np.ones((3, 2)))
    loss = mse_loss(dense(x, w), y)
    grads = tape.backward(loss)
    grads[w.grad_id]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand extents cannot be reconciled."""


class Tensor:
    """A dense float64 array, optionally registered on a :class:`GradientTape`."""

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, tape: "GradientTape | None" = None, grad_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.grad_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", grad_id={self.grad_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class GradientTape:
    """Append-only record of the operations applied to watched tensors.

    Nodes are stored in creation order, which is a valid topological order
    because an op can only consume tensors that already exist.
    """

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    released: bool = False

    def watch(self, data, kind: str = "leaf") -> Tensor:
        arr = np.array(data, dtype=np.float64)
        self.nodes.append(_Node(kind, (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _record(self, kind, inputs, out, backward) -> Tensor:
        ids = tuple(t.grad_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(kind, ids, backward, out.shape))
        return Tensor(out, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Gradients add into :attr:`gradients`, so calling this once per loss
        term is equivalent to calling it on the sum of the terms. Only leaf
        (watched) gradients are kept; intermediate ones are dropped as soon
        as they have been propagated.
        """
        if loss.tape is not self or loss.grad_id is None:
            raise ValueError("loss is not recorded on this tape")
        if self.released:
            raise ValueError("tape has been released")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {loss.grad_id: np.ones(loss.shape)}
        for idx in range(loss.grad_id, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward is None:
                if idx in self.gradients:
                    self.gradients[idx] = self.gradients[idx] + g
                else:
                    self.gradients[idx] = g
                continue
            for src, gi in zip(node.inputs, node.backward(g)):
                if src is None or gi is None:
                    continue
                if src in pending:
                    pending[src] = pending[src] + gi
                else:
                    pending[src] = gi
        return self.gradients

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of watched ``t`` after :meth:`backward`; zeros if ``t`` was unreachable."""
        if t.tape is not self or self.nodes[t.grad_id].inputs:
            raise ValueError("gradients are only kept for tensors watched on this tape")
        return self.gradients.get(t.grad_id, np.zeros(t.shape))

    def release(self) -> None:
        """Drop recorded nodes (and the intermediates their closures hold); leaf gradients stay."""
        for node in self.nodes:
            node.backward = None
        self.released = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None and t.grad_id is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    return tape._record(kind, inputs, out, backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {a} with {b}: ranks differ")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast {a} with {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(kind, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(da(g, a.data, b.data), sa), _unbroadcast(db(g, a.data, b.data), sb)

    return _apply(kind, (a, b), out, backward)


def add(a, b) -> Tensor:
    if np.isscalar(b):
        return shift(a, float(b))
    if np.isscalar(a):
        return shift(b, float(a))
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    if np.isscalar(b):
        return shift(a, -float(b))
    if np.isscalar(a):
        return shift(scale(b, -1.0), float(a))
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise product; unit axes of either operand broadcast."""
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def shift(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _apply("shift", (x,), x.data + c, lambda g: (g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _apply("scale", (x,), x.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and convolutions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either rank 2 (shared across the batch) or has the same leading
    axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _apply("matmul", (a, b), out, backward)


def dense(x, W, b=None) -> Tensor:
    """Affine map ``W @ x + b`` applied along the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {W.shape}")
    inputs = [x, W]
    bias = None
    if b is not None:
        bias = as_tensor(b)
        if bias.shape != (W.shape[0],):
            raise ShapeError(f"dense: bias {bias.shape} does not match weight {W.shape}")
        inputs.append(bias)
    X, Wd = x.data, W.data
    out = X @ Wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ Wd, g2.T @ X.reshape(-1, X.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _apply("dense", inputs, out, backward)


def _as_batched(x: np.ndarray, spatial: int) -> tuple[np.ndarray, bool]:
    if x.ndim == spatial + 1:
        return x[None], True
    if x.ndim == spatial + 2:
        return x, False
    raise ShapeError(f"expected rank {spatial + 1} or {spatial + 2} input, got {x.shape}")


def conv1d(x, k, bias=None) -> Tensor:
    """Stride-1 'same' convolution of ``x`` (``[B,] c_in, w``) with ``k`` (``c_out, c_in, kw``)."""
    x, k = as_tensor(x), as_tensor(k)
    if k.ndim != 3:
        raise ShapeError(f"conv1d kernel must be c_out x c_in x kw, got {k.shape}")
    O, C, K = k.shape
    if K % 2 == 0:
        raise ShapeError(f"conv1d kernel width must be odd, got {K}")
    X, squeeze = _as_batched(x.data, 1)
    if X.shape[1] != C:
        raise ShapeError(f"conv1d: input channels {X.shape[1]} != kernel channels {C}")
    Bn, _, W = X.shape
    p = (K - 1) // 2
    xp = np.pad(X, ((0, 0), (0, 0), (p, p)))
    cols = np.empty((C, K, Bn, W))
    for j in range(K):
        cols[:, j] = xp[:, :, j:j + W].transpose(1, 0, 2)
    cols = cols.reshape(C * K, Bn * W)
    k2 = k.data.reshape(O, C * K)
    out = (k2 @ cols).reshape(O, Bn, W).transpose(1, 0, 2)
    inputs = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv1d bias must have shape ({O},), got {bias.shape}")
        out = out + bias.data[None, :, None]
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def backward(g):
        gb3 = g[None] if squeeze else g
        g2 = gb3.transpose(1, 0, 2).reshape(O, Bn * W)
        gk = (g2 @ cols.T).reshape(O, C, K)
        gcols = (k2.T @ g2).reshape(C, K, Bn, W)
        gxp = np.zeros((Bn, C, W + 2 * p))
        for j in range(K):
            gxp[:, :, j:j + W] += gcols[:, j].transpose(1, 0, 2)
        gx = gxp[:, :, p:p + W]
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(gb3.sum(axis=(0, 2)))
        return grads

    return _apply("conv1d", inputs, out, backward)


def conv2d(x, k, bias=None) -> Tensor:
    """Stride-1 'same' convolution of ``x`` (``[B,] c_in, h, w``) with ``k`` (``c_out, c_in, kh, kw``)."""
    x, k = as_tensor(x), as_tensor(k)
    if k.ndim != 4:
        raise ShapeError(f"conv2d kernel must be c_out x c_in x kh x kw, got {k.shape}")
    O, C, KH, KW = k.shape
    if KH % 2 == 0 or KW % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {KH}x{KW}")
    X, squeeze = _as_batched(x.data, 2)
    if X.shape[1] != C:
        raise ShapeError(f"conv2d: input channels {X.shape[1]} != kernel channels {C}")
    Bn, _, H, W = X.shape
    ph, pw = (KH - 1) // 2, (KW - 1) // 2
    xp = np.pad(X, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((C, KH, KW, Bn, H, W))
    for i in range(KH):
        for j in range(KW):
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * KH * KW, Bn * H * W)
    k2 = k.data.reshape(O, -1)
    out = (k2 @ cols).reshape(O, Bn, H, W).transpose(1, 0, 2, 3)
    inputs = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def backward(g):
        gb4 = g[None] if squeeze else g
        g2 = gb4.transpose(1, 0, 2, 3).reshape(O, -1)
        gk = (g2 @ cols.T).reshape(O, C, KH, KW)
        gcols = (k2.T @ g2).reshape(C, KH, KW, Bn, H, W)
        gxp = np.zeros((Bn, C, H + 2 * ph, W + 2 * pw))
        for i in range(KH):
            for j in range(KW):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(gb4.sum(axis=(0, 2, 3)))
        return grads

    return _apply("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _apply("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _expit(x.data)
    return _apply("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softmax_temp(x, tau: float, axis: int = -1) -> Tensor:
    """Softmax of ``x / tau`` along ``axis`` with max subtraction."""
    if not tau > 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    x = as_tensor(x)
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * s).sum(axis=axis, keepdims=True)) * s / tau,)

    return _apply("softmax", (x,), s, backward)


def mean(x, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    x = as_tensor(x)
    m = x.shape[axis]
    if m == 0:
        raise ShapeError("mean over an empty axis")
    ax = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape) / m,)

    return _apply("mean", (x,), x.data.mean(axis=ax), backward)


def global_average_pool(x) -> Tensor:
    """Column means of an ``m x d`` map (the ``m`` axis is the second to last)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("global_average_pool needs rank >= 2")
    return mean(x, axis=-2)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _apply("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by ``max(||row||_2, eps)``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    active = norm > eps
    d = np.where(active, norm, eps)
    y = x.data / d

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return ((g - np.where(active, y * proj, 0.0)) / d,)

    return _apply("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _apply("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def expand(x, shape) -> Tensor:
    """Repeat unit axes of ``x`` to reach ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if _broadcast_shape(x.shape, shape) != shape:
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    return _apply("expand", (x,), np.broadcast_to(x.data, shape).copy(),
                  lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: extents {t.shape} and {ref} disagree off axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def backward(g):
        return [np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _apply("concat", xs, out, backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = 2.0 * g * diff / n
        return gp, -gp

    return _apply("mse", (pred, target), np.asarray((diff * diff).mean()), backward)


_BCE_CLIP = 1e-12


def bce_loss(pred, target) -> Tensor:
    """Mean binary cross-entropy; both operands must lie in [0, 1]."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: {pred.shape} vs {target.shape}")
    p, t = pred.data, target.data
    if p.min(initial=0.0) < 0 or p.max(initial=1.0) > 1 or t.min(initial=0.0) < 0 or t.max(initial=1.0) > 1:
        raise ValueError("bce_loss operands must lie in [0, 1]")
    pc = np.clip(p, _BCE_CLIP, 1.0 - _BCE_CLIP)
    n = p.size
    val = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean()

    def backward(g):
        gp = g * (pc - t) / (pc * (1.0 - pc)) / n
        gt = g * (np.log(1.0 - pc) - np.log(pc)) / n
        return gp, gt

    return _apply("bce", (pred, target), np.asarray(val), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (``B x K``) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    val = -logp[rows, labels].mean()

    def backward(g):
        gl = np.exp(logp)
        gl[rows, labels] -= 1.0
        return (g * gl / len(labels),)

    return _apply("cross_entropy", (logits,), np.asarray(val), backward)
