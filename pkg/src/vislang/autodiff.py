"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is eager: every operation computes its value immediately and
records a vector-Jacobian closure on the output node. ``backward`` walks the
resulting DAG once in reverse topological order and accumulates gradients on
leaf tensors that were created with ``requires_grad=True``.

Everything runs in double precision. The convolution kernels accumulate
per output element in (ci, kh, kw) order with the bias added last, so their
results are bit-identical to a scalar loop nest with the same ordering.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteValues",
    "GraphConsumed",
    "backward",
    "forward_op",
    "constant",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "tensor_sum",
    "mean",
    "mse",
    "sqrt",
    "silu",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "attention",
    "reshape",
    "transpose",
    "gather_rows",
    "straight_through",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class NonFiniteValues(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class GraphConsumed(RuntimeError):
    """Raised when backward is called twice through the same graph."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Tensors are immutable by convention once created; only the optimizer
    writes into parameter ``data`` in place, between graph evaluations.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=False)


def stop_gradient(x: Tensor) -> Tensor:
    """Value of x detached from the graph (no gradient flows through)."""
    return Tensor(x.data, requires_grad=False)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteValues(f"{op}: produced non-finite values")


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, out)
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    return t


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf.

    The graph is consumed: a second backward through any node visited here
    raises GraphConsumed.
    """
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphConsumed("backward: graph already consumed")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        node._consumed = True
        node._parents = ()
        node._vjp = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("elementwise_add", a, b)
    return _node("elementwise_add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor, axes=None) -> Tensor:
    """Sum over all elements (axes=None) or over the given axes."""
    if axes is None:
        out = a.data.sum()
        return _node("sum", np.asarray(out), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    out = a.data.sum(axis=axes)

    def vjp(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _node("sum", out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeMismatch("mean: empty tensor")
    out = a.data.mean()
    return _node("mean", np.asarray(out), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mse", a, b)
    diff = a.data - b.data
    n = a.size
    out = np.asarray((diff * diff).mean())

    def vjp(g):
        base = g * 2.0 * diff / n
        return (base, -base)

    return _node("mse", out, (a, b), vjp)


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise ShapeMismatch("sqrt: negative input")
    s = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at exactly zero; keeps perfectly-converged norms finite
        safe = np.where(s > 0, 2.0 * s, 1.0)
        return (np.where(s > 0, g / safe, 0.0),)

    return _node("sqrt", s, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the network's single smooth nonlinearity."""
    x = a.data
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    out = x * sig

    def vjp(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _node("nonlinearity", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear / convolution / attention
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w.T + b with w of shape (out_features, in_features)."""
    if w.ndim != 2:
        raise ShapeMismatch(f"linear: weight must be 2-D, got {w.shape}")
    if x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = g @ w.data
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _node("linear", out, parents, vjp)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    size = (n + 2 * padding - k) // stride + 1
    if size <= 0:
        raise ShapeMismatch(f"conv2d: spatial size {n} too small for kernel {k} "
                            f"(stride {stride}, padding {padding})")
    return size


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, (Co, Ci, KH, KW) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    B, Ci, H, W = x.shape
    Co, Ci2, KH, KW = w.shape
    if Ci != Ci2:
        raise ShapeMismatch(f"conv2d: input channels of {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (Co,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} incompatible with kernel {w.shape}")
    s, p = stride, padding
    OH = _conv_out_size(H, KH, s, p)
    OW = _conv_out_size(W, KW, s, p)

    xp = np.zeros((B, Ci, H + 2 * p, W + 2 * p), dtype=np.float64)
    xp[:, :, p : p + H, p : p + W] = x.data
    out = np.zeros((B, Co, OH, OW), dtype=np.float64)
    tmp = np.empty_like(out)
    wd = w.data
    # accumulate in (ci, kh, kw) order; the scalar oracle uses the same order
    for ci in range(Ci):
        for kh in range(KH):
            for kw in range(KW):
                xs = xp[:, ci, kh : kh + OH * s : s, kw : kw + OW * s : s]
                np.multiply(xs[:, None, :, :], wd[None, :, ci, kh, kw, None, None], out=tmp)
                out += tmp
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gx_p = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for kh in range(KH):
            for kw in range(KW):
                # (B, Co, OH, OW) x (Co, Ci) -> (B, Ci, OH, OW)
                contrib = np.tensordot(g, wd[:, :, kh, kw], axes=([1], [0]))
                gx_p[:, :, kh : kh + OH * s : s, kw : kw + OW * s : s] += np.moveaxis(contrib, 3, 1)
                xs = xp[:, :, kh : kh + OH * s : s, kw : kw + OW * s : s]
                gw[:, :, kh, kw] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        gx = gx_p[:, :, p : p + H, p : p + W]
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _node("conv2d", out, parents, vjp)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, NCHW input, (Ci, Co, KH, KW) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv_transpose2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    B, Ci, H, W = x.shape
    Ci2, Co, KH, KW = w.shape
    if Ci != Ci2:
        raise ShapeMismatch(f"conv_transpose2d: input channels of {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (Co,):
        raise ShapeMismatch(f"conv_transpose2d: bias {b.shape} incompatible with kernel {w.shape}")
    s, p = stride, padding
    OH = (H - 1) * s - 2 * p + KH
    OW = (W - 1) * s - 2 * p + KW
    if OH <= 0 or OW <= 0:
        raise ShapeMismatch(f"conv_transpose2d: output collapses for input {x.shape}, kernel {w.shape}")

    EH = (H - 1) * s + KH
    EW = (W - 1) * s + KW
    ext = np.zeros((B, Co, EH, EW), dtype=np.float64)
    tmp = np.empty((B, Co, H, W), dtype=np.float64)
    wd = w.data
    xd = x.data
    for ci in range(Ci):
        for kh in range(KH):
            for kw in range(KW):
                np.multiply(xd[:, ci, None, :, :], wd[None, ci, :, kh, kw, None, None], out=tmp)
                ext[:, :, kh : kh + H * s : s, kw : kw + W * s : s] += tmp
    out = ext[:, :, p : p + OH, p : p + OW].copy()
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        g_ext = np.zeros((B, Co, EH, EW), dtype=np.float64)
        g_ext[:, :, p : p + OH, p : p + OW] = g
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for kh in range(KH):
            for kw in range(KW):
                gs = g_ext[:, :, kh : kh + H * s : s, kw : kw + W * s : s]
                # (B, Co, H, W) x (Ci, Co) -> (B, H, W, Ci)
                contrib = np.tensordot(gs, wd[:, :, kh, kw], axes=([1], [1]))
                gx += np.moveaxis(contrib, 3, 1)
                gw[:, :, kh, kw] = np.tensordot(xd, gs, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _node("conv_transpose2d", out, parents, vjp)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    Accepts (L, d)/(S, d)/(S, dv) or batched (B, L, d)/(B, S, d)/(B, S, dv).
    """
    squeeze = q.ndim == 2
    if squeeze and not (k.ndim == 2 and v.ndim == 2):
        raise ShapeMismatch(f"scaled_dot_attention: mixed ranks {q.shape}, {k.shape}, {v.shape}")
    qd = q.data[None] if squeeze else q.data
    kd = k.data[None] if squeeze else k.data
    vd = v.data[None] if squeeze else v.data
    if qd.ndim != 3 or kd.ndim != 3 or vd.ndim != 3:
        raise ShapeMismatch(f"scaled_dot_attention: need 2-D or 3-D operands, got {q.shape}, {k.shape}, {v.shape}")
    if qd.shape[-1] != kd.shape[-1]:
        raise ShapeMismatch(f"scaled_dot_attention: query dim {q.shape} does not match key dim {k.shape}")
    if kd.shape[-2] != vd.shape[-2] or kd.shape[0] != vd.shape[0] or qd.shape[0] != kd.shape[0]:
        raise ShapeMismatch(f"scaled_dot_attention: key shape {k.shape} does not match value shape {v.shape}")

    inv = 1.0 / math.sqrt(qd.shape[-1])
    scores = np.matmul(qd, np.swapaxes(kd, 1, 2)) * inv
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(a, vd)

    def vjp(g):
        gb = g[None] if squeeze else g
        gv = np.matmul(np.swapaxes(a, 1, 2), gb)
        ga = np.matmul(gb, np.swapaxes(vd, 1, 2))
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, kd) * inv
        gk = np.matmul(np.swapaxes(gs, 1, 2), qd) * inv
        if squeeze:
            return (gq[0], gk[0], gv[0])
        return (gq, gk, gv)

    return _node("scaled_dot_attention", out[0] if squeeze else out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    return _node("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort(axes)
    return _node("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add back."""
    if x.ndim != 2:
        raise ShapeMismatch(f"gather_rows: need 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"gather_rows: need 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node("gather_rows", x.data[idx], (x,), vjp)


def straight_through(x: Tensor, values) -> Tensor:
    """Forward the given values, backward the identity onto x.

    Used to route reconstruction gradients around a non-differentiable
    assignment step: the output carries ``values`` but gradients reach x
    unchanged, exactly as if the op were the identity.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != x.shape:
        raise ShapeMismatch(f"straight_through: values {vals.shape} do not match input {x.shape}")
    return _node("straight_through", vals.copy(), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# single dispatch surface
# ---------------------------------------------------------------------------

_OP_TABLE = {
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "linear": linear,
    "nonlinearity": silu,
    "scaled_dot_attention": attention,
    "elementwise_add": add,
    "mean": mean,
    "mse": mse,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply one of the supported graph operations by name."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown kind {kind!r}; expected one of {sorted(_OP_TABLE)}") from None
    return fn(*inputs, **params)
