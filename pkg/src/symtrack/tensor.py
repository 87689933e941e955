"""Dense numpy-backed tensors with a reverse-mode differentiation tape.

Every op builds its output with :func:`_record`, which attaches a :class:`Node`
holding the op kind, the input tensors and a closure mapping the output
gradient to input gradients. Node ids are drawn from a global monotonic
counter, so sorting reachable nodes by id yields a topological order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "ShapeError",
    "NumericError",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "elementwise",
    "gelu",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "absolute",
    "maximum",
    "minimum",
    "clip",
    "matmul",
    "layer_norm",
    "standardize",
    "masked_softmax",
    "apply_row_mask",
    "reshape",
    "transpose",
    "concat",
    "index",
    "tsum",
    "mean",
    "conv2d",
    "backward",
]

DTYPES = (np.float32, np.float64)
BLOCKED_BIAS = -1e9

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple
    grad_fn: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Reachable part of the graph behind a scalar, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: "Tensor") -> "Tape":
        seen: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls(nodes=[seen[k] for k in sorted(seen)])


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return None if self.node is None else self.node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple:
    like = a if isinstance(a, Tensor) else b
    return _as_tensor(a, like), _as_tensor(b, like)


def _check_finite(out: np.ndarray, kind: str) -> None:
    # one reduction is cheaper than isfinite().all(); NaN/Inf propagate into the sum,
    # and a spurious overflow of the sum itself falls through to the exact check
    if not np.isfinite(out.sum()):
        if not np.isfinite(out).all():
            raise NumericError(f"{kind}: non-finite output")


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    _check_finite(out, kind)
    t = Tensor(out)
    if any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = Node(next(_ids), kind, tuple(inputs), grad_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record("div", out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the error-function normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _record("gelu", out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return _record("maximum", np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _record("minimum", np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` take two operands,
    ``scale`` takes a python scalar as ``b``, ``gelu`` takes one operand."""
    if kind == "gelu":
        return gelu(a)
    if kind == "scale":
        return scale(a, b)
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise ShapeError(f"{kind} needs two operands")
    return _ELEMENTWISE[kind](a, b)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), grad_fn)


def standardize(x: Tensor, axes: tuple, eps: float) -> Tensor:
    """Zero mean / unit variance over ``axes`` (biased variance)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (xc * inv).astype(x.dtype, copy=False)

    def grad_fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).mean(axis=axes, keepdims=True)
        return ((inv * (g - gm - out * gxm)).astype(x.dtype, copy=False),)

    return _record("standardize", out, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = gamma.shape[-1]
    if x.shape[-1] != D or beta.shape[-1] != D:
        raise ShapeError(f"layer_norm: last axis {x.shape[-1]} does not match D={D}")
    return add(mul(standardize(x, (x.ndim - 1,), eps), gamma), beta)


def masked_softmax(logits: Tensor, blocked=None) -> Tensor:
    """Softmax over the last axis with ``blocked`` entries forced to zero.

    ``blocked`` is a boolean array broadcastable to ``logits``. Blocked logits
    receive an additive bias of -1e9 before the max-subtracted exponent, so they
    underflow to exactly 0 and pass exactly zero gradient.
    """
    z = logits.data
    if blocked is not None:
        blocked = np.asarray(blocked, dtype=bool)
        try:
            full = np.broadcast_to(blocked, z.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask {blocked.shape} does not align with {z.shape}") from None
        if full.all(axis=-1).any():
            raise NumericError("masked_softmax: a row is fully blocked")
        z = z + np.where(blocked, z.dtype.type(BLOCKED_BIAS), z.dtype.type(0))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", out, (logits,), grad_fn)


def apply_row_mask(x: Tensor, masked) -> Tensor:
    """Zero the rows (second-to-last axis entries) flagged in ``masked``.

    Unmasked rows are copied bitwise; masked rows pass zero gradient.
    """
    masked = np.asarray(masked, dtype=bool)
    if masked.shape[-1] != x.shape[-2]:
        raise ShapeError(f"mask length {masked.shape[-1]} does not match {x.shape[-2]} rows")
    m = masked[..., None]
    out = np.where(m, x.dtype.type(0), x.data)
    return _record("apply_mask", out, (x,), lambda g: (np.where(m, g.dtype.type(0), g),))


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(parts), grad_fn)


def index(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g) if _is_fancy(key) else full.__setitem__(key, g)
        return (full,)

    return _record("index", np.array(out, copy=True), (a,), grad_fn)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,H,W,C] -> [B,H,W,k*k*C] with zero 'same' padding."""
    p = k // 2
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = [xp[:, i:i + H, j:j + W, :] for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=-1)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution on channels-last input.

    ``w`` has shape [k, k, C_in, C_out] with odd ``k``.
    """
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {w.shape[:2]}")
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel C_in={cin}")
    B, H, W, _ = x.shape
    cols = _im2col(x.data, k)
    wm = w.data.reshape(k * k * cin, cout)
    out = cols @ wm
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        gw = gx = None
        if w.requires_grad:
            gw = (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
        if x.requires_grad:
            gcols = (g @ wm.T).reshape(B, H, W, k * k, cin)
            p = k // 2
            gxp = np.zeros((B, H + 2 * p, W + 2 * p, cin), dtype=x.dtype)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, idx, :]
            gx = gxp[:, p:p + H, p:p + W, :]
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return _record("conv2d", out, inputs, grad_fn)


# ---------------------------------------------------------------- reverse pass

def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that
    requires grad. Returns the traced tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return Tape()
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.grad_fn(g)):
            if gx is None or not x.requires_grad:
                continue
            if x.node is not None:
                key = x.node.id
                grads[key] = gx if key not in grads else grads[key] + gx
            else:
                gx = np.asarray(gx, dtype=x.dtype).reshape(x.shape)
                x.grad = gx.copy() if x.grad is None else x.grad + gx
    return tape
