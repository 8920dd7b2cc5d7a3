"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Only the operations the stereo/detection pipeline needs are provided.  There is
no broadcasting beyond tensor-vs-scalar; use :func:`repeat` to expand an axis
explicitly.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return elementwise("div", self, other)
        return elementwise("mul", self, 1.0 / float(other))

    def __neg__(self):
        return elementwise("neg", self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return elementwise("exp", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def relu(self):
        return elementwise("relu", self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = {"exp", "tanh", "sigmoid", "relu", "neg", "log", "softplus", "abs", "sin", "cos", "square"}
_BINARY = {"add", "sub", "mul", "div"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply an elementwise op.  ``b`` is a same-shape tensor or a python scalar."""
    a = as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise ContractError(f"{op_kind} is unary")
        return _unary(op_kind, a)
    if op_kind not in _BINARY:
        raise ContractError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise ContractError(f"{op_kind} needs two operands")
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            if b.size == 1 and b.ndim == 0:
                pass
            else:
                raise DimensionError(f"{op_kind}: shape {a.shape} vs {b.shape}")
        return _binary(op_kind, a, b)
    s = float(b)
    x = a.data
    if op_kind == "add":
        return _make(x + s, (a,), lambda g: (g,), "add_s")
    if op_kind == "sub":
        return _make(x - s, (a,), lambda g: (g,), "sub_s")
    if op_kind == "mul":
        return _make(x * s, (a,), lambda g: (g * s,), "mul_s")
    return _make(x / s, (a,), lambda g: (g / s,), "div_s")


def _binary(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    scalar_b = b.shape != a.shape

    def red(g):
        return np.asarray(g.sum()) if scalar_b else g

    if op_kind == "add":
        out = x + y

        def bw(g):
            return g, red(g)
    elif op_kind == "sub":
        out = x - y

        def bw(g):
            return g, red(-g)
    elif op_kind == "mul":
        out = x * y

        def bw(g):
            return g * y, red(g * x)
    else:
        out = x / y

        def bw(g):
            return g / y, red(-g * x / (y * y))
    return _make(out, (a, b), bw, op_kind)


def _unary(op_kind: str, a: Tensor) -> Tensor:
    x = a.data
    if op_kind == "exp":
        out = np.exp(x)
        d = out
    elif op_kind == "tanh":
        out = np.tanh(x)
        d = 1.0 - out * out
    elif op_kind == "sigmoid":
        out = _sigmoid(x)
        d = out * (1.0 - out)
    elif op_kind == "relu":
        out = np.maximum(x, 0.0)
        d = (x > 0).astype(np.float64)
    elif op_kind == "neg":
        out = -x
        d = -1.0
    elif op_kind == "log":
        out = np.log(x)
        d = 1.0 / x
    elif op_kind == "softplus":
        out = _softplus(x)
        d = _sigmoid(x)
    elif op_kind == "abs":
        out = np.abs(x)
        d = np.sign(x)
    elif op_kind == "sin":
        out = np.sin(x)
        d = np.cos(x)
    elif op_kind == "cos":
        out = np.cos(x)
        d = -np.sin(x)
    else:  # square
        out = x * x
        d = 2.0 * x
    return _make(out, (a,), lambda g: (g * d,), op_kind)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def tanh(a):
    return elementwise("tanh", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def relu(a):
    return elementwise("relu", a)


def softplus(a):
    return elementwise("softplus", a)


def tabs(a):
    return elementwise("abs", a)


def sin(a):
    return elementwise("sin", a)


def cos(a):
    return elementwise("cos", a)


def square(a):
    return elementwise("square", a)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was not clipped."""
    x = a.data
    out = np.clip(x, lo, hi)
    mask = ((x >= lo) & (x <= hi)).astype(np.float64)
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return a - relu(a - b)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    x = a.data
    out = np.asarray(x.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], copy=True)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: {ref} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def repeat(a: Tensor, n: int, axis: int = 0) -> Tensor:
    """Tile a size-1 axis ``n`` times (explicit stand-in for broadcasting)."""
    if a.shape[axis] != 1:
        raise DimensionError(f"repeat needs a size-1 axis, got {a.shape}")
    out = np.repeat(a.data, n, axis=axis)
    return _make(out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),), "repeat")


def gather_weighted(a: Tensor, index: np.ndarray, weight: np.ndarray) -> Tensor:
    """out[...] = sum_k weight[..., k] * a.flat[index[..., k]].

    The backbone of every interpolation/resampling in the pipeline.  Backward
    scatters with the same weights using a fixed (sequential) summation order.
    """
    index = np.asarray(index, dtype=np.int64)
    weight = np.asarray(weight, dtype=np.float64)
    if index.shape != weight.shape:
        raise DimensionError(f"gather index {index.shape} vs weight {weight.shape}")
    flat = a.data.reshape(-1)
    out = (flat[index] * weight).sum(axis=-1)
    size = flat.size

    def bw(g):
        contrib = (weight * g[..., None]).reshape(-1)
        full = np.bincount(index.reshape(-1), weights=contrib, minlength=size)
        return (full.reshape(a.shape),)

    return _make(out, (a,), bw, "gather")


def take(a: Tensor, flat_index: np.ndarray) -> Tensor:
    idx = np.asarray(flat_index, dtype=np.int64)
    return gather_weighted(a, idx[..., None], np.ones(idx.shape + (1,)))


# ---------------------------------------------------------------------------
# convolution, softmax, losses
# ---------------------------------------------------------------------------


CONV_STRATEGY = "auto"  # "input" unfolds the input (im2col), "output" folds per-offset products; auto picks the smaller


def conv_nd(x: Tensor, kernel: Tensor, stride=1, padding=0, bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation over 2 or 3 spatial axes.

    x: (C, *S); kernel: (C_out, C, *K); output (C_out, *floor((S + 2p - K)/s) + 1).
    """
    nsp = x.ndim - 1
    if nsp not in (2, 3) or kernel.ndim != nsp + 2:
        raise DimensionError(f"conv_nd: input {x.shape}, kernel {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv_nd: kernel expects {kernel.shape[1]} channels, input has {x.shape[0]}")
    stride = (stride,) * nsp if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * nsp if isinstance(padding, int) else tuple(padding)
    if any(s < 1 for s in stride):
        raise DimensionError("stride must be >= 1")
    ksz = kernel.shape[2:]
    spatial = x.shape[1:]
    out_sz = []
    for n, k, s, p in zip(spatial, ksz, stride, padding):
        if k > n + 2 * p:
            raise DimensionError(f"kernel {ksz} larger than padded input {spatial} (pad {padding})")
        out_sz.append((n + 2 * p - k) // s + 1)
    out_sz = tuple(out_sz)
    xp = np.pad(x.data, [(0, 0)] + [(p, p) for p in padding])
    w = kernel.data
    c_out, c_in = w.shape[:2]
    n_k = int(np.prod(ksz))
    offsets = list(np.ndindex(*ksz))
    sp_axes = tuple(range(1, nsp + 1))
    pad_sz = xp.shape[1:]

    def window(off):
        return (slice(None),) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sz)
        )

    strategy = CONV_STRATEGY
    if strategy == "auto":
        strategy = "output" if c_out * xp[0].size < c_in * int(np.prod(out_sz)) else "input"
    # kernel as (C_out, C*K) for im2col, or (K*C_out, C) for output folding
    w_in = w.reshape(c_out, c_in * n_k)
    w_out = np.moveaxis(w.reshape(c_out, c_in, n_k), 2, 0).reshape(n_k * c_out, c_in)
    x2 = xp.reshape(c_in, -1)
    cols = None
    if strategy == "input":
        views = np.lib.stride_tricks.sliding_window_view(xp, ksz, axis=sp_axes)
        views = views[(slice(None),) + tuple(slice(0, s * (n - 1) + 1, s) for s, n in zip(stride, out_sz))]
        perm = (0,) + tuple(range(nsp + 1, 2 * nsp + 1)) + sp_axes
        cols = np.ascontiguousarray(views.transpose(perm)).reshape(c_in * n_k, -1)
        out = (w_in @ cols).reshape((c_out,) + out_sz)
    else:
        z = (w_out @ x2).reshape((n_k, c_out) + pad_sz)
        out = np.zeros((c_out,) + out_sz)
        for i, off in enumerate(offsets):
            out += z[i][window(off)]
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * nsp)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = gk = None
        if cols is not None:
            g2 = g.reshape(c_out, -1)
            if kernel.requires_grad:
                gk = (g2 @ cols.T).reshape(w.shape)
            if x.requires_grad:
                gcols = (w_in.T @ g2).reshape((c_in,) + tuple(ksz) + out_sz)
                gxp = np.zeros_like(xp)
                for off in offsets:
                    gxp[window(off)] += gcols[(slice(None),) + off]
        else:
            gz = np.zeros((n_k, c_out) + pad_sz)
            for i, off in enumerate(offsets):
                gz[i][window(off)] = g
            gz = gz.reshape(n_k * c_out, -1)
            if kernel.requires_grad:
                gk = np.moveaxis((gz @ x2.T).reshape(n_k, c_out, c_in), 0, 2).reshape(w.shape)
            if x.requires_grad:
                gxp = (w_out.T @ gz).reshape(xp.shape)
        if x.requires_grad:
            crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))
            gx = gxp[crop]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=sp_axes)

    return _make(out, parents, bw, "conv")


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def smooth_l1_elementwise(x: Tensor, beta: float = 1.0) -> Tensor:
    """Per-element Huber-style penalty of a residual tensor."""
    if beta <= 0:
        raise ContractError("beta must be > 0")
    r = x.data
    a = np.abs(r)
    small = a < beta
    out = np.where(small, 0.5 * r * r / beta, a - 0.5 * beta)
    d = np.where(small, r / beta, np.sign(r))
    return _make(out, (x,), lambda g: (g * d,), "smooth_l1")


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 of ``pred - target``."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: {pred.shape} vs {target.shape}")
    return mean(smooth_l1_elementwise(pred - target, beta))


# ---------------------------------------------------------------------------
# backward / tape
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a loss, in topological (inputs-first) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate into any existing ``.grad``; clear them between
    steps with :func:`zero_grad`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else np.asarray(pg, dtype=np.float64)
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numeric_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(Tensor(x)).item()
        flat[i] = old - eps
        fm = fn(Tensor(x)).item()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError("eps must lie in [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    out = fn(t)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = t.grad if t.grad is not None else np.zeros_like(x0)
    numeric = numeric_grad(fn, x0, eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------------------
# dump format
# ---------------------------------------------------------------------------


def dumps(t) -> bytes:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = "dims: " + " ".join(str(d) for d in arr.shape) + "\n"
    return header.encode("ascii") + arr.tobytes()


def loads(buf: bytes) -> Tensor:
    nl = buf.index(b"\n")
    header = buf[:nl].decode("ascii")
    if not header.startswith("dims:"):
        raise ValueError("tensor dump must start with 'dims:'")
    dims = tuple(int(d) for d in header[5:].split())
    arr = np.frombuffer(buf[nl + 1:], dtype="<f8")
    if arr.size != math.prod(dims):
        raise ValueError(f"tensor dump has {arr.size} values, header says {dims}")
    return Tensor(arr.reshape(dims).astype(np.float64))


def save(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads(fh.read())
