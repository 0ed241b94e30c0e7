"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the local vector-Jacobian product; the
graph is built as the forward pass runs and released by :func:`backward`.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_grad_enabled = True


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


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)


ArrayLike = "Tensor | np.ndarray | float"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge when any parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------
def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Trailing-aligned broadcast; extent 1 stretches."""
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ValueError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible")
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            unbroadcast(da(g, ad, bd, out), ad.shape) if a.requires_grad else None,
            unbroadcast(db(g, ad, bd, out), bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def maximum(a, b) -> Tensor:
    # ties route to the first argument
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


def _unary(a, fwd, dfn) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = fwd(x)
    return _make(out, (a,), lambda g: (dfn(g, x, out),))


def neg(a) -> Tensor:
    return _unary(a, np.negative, lambda g, x, o: -g)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def square(a) -> Tensor:
    return _unary(a, np.square, lambda g, x, o: 2.0 * g * x)


def power(a, p: float) -> Tensor:
    p = float(p)
    return _unary(a, lambda x: np.power(x, p), lambda g, x, o: g * p * np.power(x, p - 1.0))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    return _unary(
        a, lambda x: np.where(x > 0, x, slope * x), lambda g, x, o: g * np.where(x > 0, 1.0, slope)
    )


def softplus(a) -> Tensor:
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda g, x, o: g * expit(x))


def sigmoid(a) -> Tensor:
    return _unary(a, expit, lambda g, x, o: g * o * (1.0 - o))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda g, x, o: -g * np.sin(x))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "sin": sin,
    "cos": cos,
}
_BINARY = {"add", "mul", "sub", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs operands of rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        raise ValueError("matmul expects rank >= 2 operands; reshape vectors first")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape
    return _make(out, (a,), lambda g: (_expand(g, shape, axes, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape
    return _make(out, (a,), lambda g: (_expand(g, shape, axes, keepdims) / n,))


def max_(a, axis: int | None = None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first argmax on ties."""
    a = as_tensor(a)
    x = a.data
    if axis is None:
        flat = int(np.argmax(x))
        out = x.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def vjp(g):
            gx = np.zeros_like(x)
            gx.reshape(-1)[flat] = np.sum(g)
            return (gx,)

        return _make(np.asarray(out), (a,), vjp)
    (ax,) = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def vjp(g):
        gx = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return _make(out, (a,), vjp)


_REDUCE = {"sum": sum_, "mean": mean, "max": max_}


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name."""
    try:
        return _REDUCE[op](a, axis, keepdims)
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (unbroadcast(g, src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], ax)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data[index]

    def vjp(g):
        gx = np.zeros(src, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, dtype=DTYPE), (a,), vjp)


def take(a, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; ``idx`` may have any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    src = a.shape
    out = a.data[idx]

    def vjp(g):
        rows = g.reshape(-1, *src[1:])
        flat = idx.reshape(-1)
        if a.ndim == 1:
            return (np.bincount(flat, weights=rows, minlength=src[0]).astype(DTYPE),)
        gx = np.zeros((src[0], int(np.prod(src[1:]))), dtype=DTYPE)
        _scatter_add_rows(gx, flat, rows.reshape(len(flat), -1))
        return (gx.reshape(src),)

    return _make(out, (a,), vjp)


def _scatter_add_rows(dst: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    # sparse-matrix product beats np.add.at for wide rows
    from scipy.sparse import csr_matrix

    m = csr_matrix(
        (np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(dst.shape[0], len(idx))
    )
    dst += m @ rows


def scatter_rows(src, idx: np.ndarray, n: int, fill: float | np.ndarray = 0.0) -> Tensor:
    """Rows of ``src`` placed at ``idx`` of an ``n``-row array prefilled with ``fill``."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.empty((n,) + src.shape[1:], dtype=DTYPE)
    out[...] = fill
    out[idx] = src.data
    return _make(out, (src,), lambda g: (g[idx],))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``mask`` holds, else from ``b`` (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (
            unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None,
            unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. ``x``: (N, C, H, W); ``w``: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {w.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        g = np.asarray(g, dtype=DTYPE)
        if node.grad is None:
            node.grad = np.array(g, dtype=DTYPE)
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._vjp = None


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------
class Module:
    """Container whose tensor attributes (recursively) are its parameters."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform init, bound gain * sqrt(3 / fan_in)."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = np.sqrt(2.0), bias: bool = True):
        self.weight = parameter(uniform_init(rng, (n_in, n_out), n_in, gain))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
TENSOR_MAGIC = b"HFTB"


def write_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    """One block: magic, name length + utf-8 name, rank, extents (u64), float64 LE payload."""
    arr = np.asarray(array, dtype="<f8")  # tobytes copies to C order; ascontiguousarray would promote 0-d
    raw = name.encode("utf-8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray] | None:
    magic = fh.read(4)
    if not magic:
        return None
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor block magic {magic!r}")
    (n,) = struct.unpack("<I", fh.read(4))
    name = fh.read(n).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated payload for tensor {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(DTYPE)
    return name, arr


def write_tensors(fh: BinaryIO, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    for name, arr in tensors:
        write_tensor(fh, name, arr)


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    out = {}
    while (block := read_tensor(fh)) is not None:
        out[block[0]] = block[1]
    return out
