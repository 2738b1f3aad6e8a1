"""Small reverse-mode differentiation engine over numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order, visiting each node once and summing gradients
across fan-out. Broadcasting is limited to explicit bias/scale forms.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, NonFinite, NonScalarRoot, ShapeError, TruncatedShard, VersionMismatch

_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf and raise NonFinite."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        raise TypeError("tensor division only by scalars")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- reverse pass
    def backward(self) -> None:
        if self.data.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"{node.op}: grad shape {g.shape} != input shape {parent.shape}")
                if parent.grad is None:
                    # grads are never mutated in place, so interior nodes may alias
                    parent.grad = np.array(g, dtype=parent.dtype) if parent.is_leaf else np.asarray(g, dtype=parent.dtype)
                else:
                    parent.grad = parent.grad + g
            # interior grads are not needed once propagated
            node.grad = None
            node._backward = None
            node._parents = ()


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFinite(f"non-finite output from {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (use add_bias)")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b matches the trailing dimensions of x."""
    x = _as_tensor(x)
    b = _as_tensor(b, x.dtype)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _make(np.where(m, x.data, 0).astype(x.dtype), (x,), lambda g: (g * m,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(y, (x,), back, "gelu")


def where_rows(mask, x: Tensor, row: Tensor) -> Tensor:
    """Replace rows of ``x`` (last axis is the feature axis) by ``row`` where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1] or row.shape != x.shape[-1:]:
        raise ShapeError(f"where_rows: mask {mask.shape}, x {x.shape}, row {row.shape}")
    m = mask[..., None]
    out = np.where(m, row.data, x.data)

    def back(g):
        return (np.where(m, 0, g).astype(g.dtype), g[mask].sum(axis=0))

    return _make(out, (x, row), back, "where_rows")


# ---------------------------------------------------------------- shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or (..., n, k) @ (..., k, m) with identical batch dims."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif a.shape[:-2] == b.shape[:-2]:

        def back(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    return _make(ad @ bd, (a, b), back, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tuple(tensors), back, "concat")


def _needs_add_at(idx) -> bool:
    # integer fancy indices may repeat and need unbuffered accumulation
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) and np.asarray(p).dtype.kind in "iu" for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic slicing and integer/boolean gather; gradient scatters back with add.at."""
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    scatter_add = _needs_add_at(idx)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if scatter_add:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(out, copy=True), (x,), back, "getitem")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along axis 0 with an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise IndexError("take_rows: index out of range")
    return getitem(x, index)


def masked_select(x: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[: mask.ndim]:
        raise ShapeError(f"masked_select: mask {mask.shape} vs tensor {x.shape}")
    return getitem(x, mask)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=ax, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=ax, keepdims=keepdims)), (x,), back, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine pair."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))
    gd = gamma.data if gamma is not None else None
    out = xhat if gamma is None else xhat * gd
    if beta is not None:
        out = out + beta.data

    def back(g):
        gx = g if gd is None else g * gd
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)
    return _make(out.astype(x.dtype), parents, back, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True)) + eps
    y = xd / n

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make(y, (x,), back, "l2_normalize")


# ---------------------------------------------------------------- conv1d


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x: (B, C, Lp) -> (B, L_out, C * k)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)  # (B, C, L_out, k)
    return win.transpose(0, 2, 1, 3).reshape(x.shape[0], win.shape[2], -1)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlation: x (B, C_in, L), w (C_out, C_in, k), b (C_out,) -> (B, C_out, L_out)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} and w {w.shape} incompatible")
    bsz, c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    if xp.shape[2] < k:
        raise ShapeError("conv1d: input shorter than kernel")
    cols = _im2col(xp, k)  # (B, L_out, C_in*k)
    wm = w.data.reshape(c_out, -1)
    out = (cols @ wm.T).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    l_out = out.shape[2]

    def back(g):
        gt = g.transpose(0, 2, 1)  # (B, L_out, C_out)
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[2])).reshape(w.shape)
        gcols = (gt @ wm).reshape(bsz, l_out, c_in, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + l_out] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, w) + ((b,) if b is not None else ())
    return _make(np.ascontiguousarray(out).astype(x.dtype), parents, back, "conv1d")


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f, inputs: list[Tensor], h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, floor).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    max_rel = max_abs = 0.0
    n = 0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ai = a.reshape(-1)[i]
                err = abs(ai - num)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(ai), abs(num), floor))
                n += 1
    return GradCheckReport(float(max_rel), float(max_abs), tol, n)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Named float32 little-endian tensors behind a JSON index."""
    index, blobs, off = [], [], 0
    for name in tensors:
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": off, "nbytes": len(raw)})
        blobs.append(raw)
        off += len(raw)
    head = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise TruncatedShard(f"{path}: too short")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    head = json.loads(raw[_CKPT_HEAD.size : _CKPT_HEAD.size + hlen])
    base = _CKPT_HEAD.size + hlen
    out = {}
    for ent in head["tensors"]:
        start = base + ent["offset"]
        if start + ent["nbytes"] > len(raw):
            raise TruncatedShard(f"{path}: tensor {ent['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=ent["nbytes"] // 4, offset=start)
        out[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float32)
    return out, head["meta"]
