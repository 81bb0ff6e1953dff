"""Dense float64 tensors with reverse-mode differentiation.

The op vocabulary is deliberately small: it covers what the network blocks,
losses and distillation terms need and nothing else.  Every op checks its
output for NaN/Inf and raises ``FloatingPointError`` instead of propagating
non-finite values.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _active_tapes() -> list:
    tapes = getattr(_state, "tapes", None)
    if tapes is None:
        tapes = _state.tapes = []
    return tapes


class Tensor:
    """N-d float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of the differentiable nodes created while active.

    Nodes are appended in creation order, which is already a topological
    order, so ``backward`` only has to walk the record in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        _run_backward(loss, self.nodes)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
        for tape in _active_tapes():
            tape.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node.is_leaf:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and not p.is_leaf and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(loss: Tensor, order: Sequence[Tensor]) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient flowing out of {node._op}")
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    _run_backward(loss, tape.nodes if tape is not None else _topological_order(loss))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without cancellation for large |a|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: (g * expit(-a.data),), "log_sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)
    return _make(out, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,), "mean")


def global_avg_pool(a) -> Tensor:
    """Mean over the two spatial axes of an (..., H, W, C) tensor."""
    return mean(a, axis=(-3, -2))


def l1_norm(a, axis=None) -> Tensor:
    return tsum(absolute(a), axis)


def l2_norm(a, axis=None) -> Tensor:
    return sqrt(tsum(square(a), axis))


def squared_l2(a, axis=None) -> Tensor:
    return tsum(square(a), axis)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),), "expand_dims")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tuple(ts), bw, "stack")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def rot90(a, k: int, axes=(-2, -1)) -> Tensor:
    a = as_tensor(a)
    out = np.rot90(a.data, k, axes).copy()
    return _make(out, (a,), lambda g: (np.rot90(g, -k, axes).copy(),), "rot90")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw, "matmul")


def im2col(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """(B, H, W, C) -> (B, Ho, Wo, kernel*kernel*C) patches ordered (ki, kj, c)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"im2col expects (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kernel or Wp < kernel:
        raise ValueError("input smaller than kernel")
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B, Ho, Wo, kernel * kernel * C)

    def bw(g):
        g6 = g.reshape(B, Ho, Wo, kernel, kernel, C)
        gp = np.zeros((B, Hp, Wp, C))
        for i in range(kernel):
            for j in range(kernel):
                gp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += g6[:, :, :, i, j]
        return (gp[:, padding:padding + H, padding:padding + W] if padding else gp,)

    return _make(cols, (x,), bw, "im2col")


def conv2d(x, w, b=None, stride: int = 1, padding: str | int = "same") -> Tensor:
    """2-D cross-correlation in NHWC layout; ``w`` has shape (k, k, Cin, Cout).

    ``padding="same"`` zero-pads by (k-1)//2 so stride 1 keeps H, W and
    stride 2 yields ceil(H/2), ceil(W/2).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = expand_dims(x, 0)
    k, k2, cin, cout = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    pad = (k - 1) // 2 if padding == "same" else int(padding)
    if k == 1 and stride == 1:
        out = matmul(x, reshape(w, (cin, cout)))
    else:
        out = matmul(im2col(x, k, stride, pad), reshape(w, (k * k * cin, cout)))
    if b is not None:
        out = add(out, b)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- softmax family


def softmax(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(z)
    s = z.data / temperature
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / temperature,)

    return _make(y, (z,), bw, "softmax")


def log_softmax(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(z)
    s = z.data / temperature
    s = s - s.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    y = np.exp(out)

    def bw(g):
        return ((g - y * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (z,), bw, "log_softmax")


def kl_divergence(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) along ``axis`` for probability tensors; terms with p=0 vanish."""
    p, q = as_tensor(p), as_tensor(q)
    logp = log(add(p, (p.data <= 0) * 1.0))
    return tsum(mul(p, sub(logp, log(q))), axis)


# ---------------------------------------------------------------- resampling


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _apply_along(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [axis])), 0, axis)


def resize(a, size: tuple[int, int], axes: tuple[int, int] = (-3, -2)) -> Tensor:
    """Bilinear (half-pixel) resampling of two spatial axes."""
    a = as_tensor(a)
    ah, aw = (ax % a.ndim for ax in axes)
    h, w = a.shape[ah], a.shape[aw]
    if (h, w) == tuple(size):
        return a
    mh, mw = _bilinear_matrix(size[0], h), _bilinear_matrix(size[1], w)
    out = _apply_along(mw, _apply_along(mh, a.data, ah), aw)

    def bw(g):
        return (_apply_along(mh.T, _apply_along(mw.T, g, aw), ah),)

    return _make(out, (a,), bw, "resize")


def resize_nearest(arr: np.ndarray, size: tuple[int, int], axes: tuple[int, int] = (-3, -2)) -> np.ndarray:
    """Nearest-neighbour resampling for non-differentiable maps (heatmaps, labels)."""
    arr = np.asarray(arr)
    ah, aw = (ax % arr.ndim for ax in axes)
    h, w = arr.shape[ah], arr.shape[aw]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return np.take(np.take(arr, rows, axis=ah), cols, axis=aw)


# ---------------------------------------------------------------- serialization

SLKT_MAGIC = b"SLKT"
SLKT_VERSION = 1


def write_slkt(fh: BinaryIO, array) -> None:
    arr = np.array(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise ValueError("rank too large for SLKT")
    fh.write(SLKT_MAGIC)
    fh.write(struct.pack("<BB", SLKT_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_slkt(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != SLKT_MAGIC:
        raise ValueError(f"bad SLKT magic {magic!r}")
    version, rank = struct.unpack("<BB", fh.read(2))
    if version != SLKT_VERSION:
        raise ValueError(f"unsupported SLKT version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated SLKT payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_slkt(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_slkt(fh)
