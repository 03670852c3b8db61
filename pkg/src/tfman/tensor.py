"""Dense tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph
in reverse topological order. Graphs are only recorded while grad mode is
enabled and at least one input requires a gradient, so inference builds
nothing.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float32), "grad": True}
_mac = {"counter": None, "tag": "untagged"}
_kinks = {"log": None}


class ConfigurationError(ValueError):
    """Raised when operand shapes or hyperparameters are inconsistent."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts from conv and matmul kernels.

    Yields a ``Counter`` keyed by the active ``mac_tag``.
    """
    prev = _mac["counter"]
    counter: Counter = Counter()
    _mac["counter"] = counter
    try:
        yield counter
    finally:
        _mac["counter"] = prev


@contextlib.contextmanager
def mac_tag(tag: str):
    prev = _mac["tag"]
    _mac["tag"] = tag
    try:
        yield
    finally:
        _mac["tag"] = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every PReLU / abs input evaluated inside the block."""
    prev = _kinks["log"]
    log: list[np.ndarray] = []
    _kinks["log"] = log
    try:
        yield log
    finally:
        _kinks["log"] = prev


def _note_signs(x: np.ndarray) -> None:
    if _kinks["log"] is not None:
        _kinks["log"].append(np.packbits(x >= 0))


def _add_macs(n: int) -> None:
    counter = _mac["counter"]
    if counter is not None:
        counter[_mac["tag"]] += int(n)


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=_state["dtype"])


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


class Param(Tensor):
    """A trainable leaf tensor with a dotted module path as its name."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def tabs(x: Tensor) -> Tensor:
    # sign(0) == 0 pins the subgradient at the kink
    _note_signs(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tsum(x: Tensor) -> Tensor:
    return Tensor.from_op(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor.from_op(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inv),),
    )


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(x.data[idx]), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor.from_op(
        np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)
    return Tensor.from_op(
        np.stack([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------- convolution


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch columns laid out (B, Cin*Kh*Kw, Ho*Wo) so one matmul does the contraction."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    cols = _im2col(_pad_hw(x, padding), kh, kw, stride, ho, wo)
    return np.matmul(w.reshape(cout, -1), cols).reshape(b, cout, ho, wo)


def _scatter_raw(x: np.ndarray, w: np.ndarray, stride: int, full_h: int, full_w: int) -> np.ndarray:
    """Un-cropped transposed convolution; ``w`` is (Cin, Cout, Kh, Kw)."""
    b, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    cols = np.matmul(w.reshape(cin, -1).T, x.reshape(b, cin, h * wd)).reshape(b, cout, kh, kw, h, wd)
    out = np.zeros((b, cout, full_h, full_w), dtype=cols.dtype)
    hs = stride * (h - 1) + 1
    ws = stride * (wd - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, i, j]
    return out


def _weight_grad(g: np.ndarray, xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sum over batch and sites of g (B, Cg, Ho, Wo) against patches of xp; (Cg, Cx*Kh*Kw)."""
    b, cg, ho, wo = g.shape
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    return np.einsum("bgs,bks->gk", g.reshape(b, cg, ho * wo), cols, optimize=True)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``w`` is (Cout, Cin, Kh, Kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ConfigurationError(f"kernel expects {wcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")
    out = _conv_raw(x.data, w.data, stride, padding)
    ho, wo = out.shape[2:]
    _add_macs(b * cout * ho * wo * cin * kh * kw)

    def back(g):
        hp, wp = h + 2 * padding, wd + 2 * padding
        gx = _scatter_raw(g, w.data, stride, hp, wp)
        gx = gx[:, :, padding:padding + h, padding:padding + wd]
        gw = _weight_grad(g, _pad_hw(x.data, padding), kh, kw, stride).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), gw, gb)

    parents = (x, w, bias if bias is not None else Tensor(np.zeros(0, dtype=out.dtype)))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    return Tensor.from_op(out, parents, back)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d``; ``w`` is (Cin, Cout, Kh, Kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv_transpose2d expects 4-D operands, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ConfigurationError(f"kernel expects {wcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    if full_h - 2 * padding < 1 or full_w - 2 * padding < 1:
        raise ConfigurationError("transposed convolution output extent would be non-positive")
    full = _scatter_raw(x.data, w.data, stride, full_h, full_w)
    out = np.ascontiguousarray(full[:, :, padding:full_h - padding, padding:full_w - padding])
    _add_macs(b * cin * h * wd * cout * kh * kw)

    def back(g):
        gp = _pad_hw(g, padding)
        gx = _conv_raw(gp, w.data, stride, 0)
        gw = _weight_grad(x.data, gp, kh, kw, stride).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, w, bias if bias is not None else Tensor(np.zeros(0, dtype=out.dtype)))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    return Tensor.from_op(out, parents, back)


# ---------------------------------------------------------------- nonlinear / pooling


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(g):
        gx = g * y
        gx -= y * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return Tensor.from_op(y, (x,), back)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1), or a single shared slope."""
    a = slope.data
    if a.size not in (1, x.shape[1] if x.ndim > 1 else 1):
        raise ConfigurationError(f"slope of size {a.size} does not match {x.shape[1]} channels")
    a_b = a.reshape(-1) if a.size == 1 else a.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x.data >= 0
    _note_signs(x.data)
    out = np.where(pos, x.data, a_b * x.data)

    def back(g):
        gx = np.where(pos, g, a_b * g)
        neg_part = np.where(pos, 0, x.data * g)
        if a.size == 1:
            ga = neg_part.sum().reshape(a.shape)
        else:
            axes = (0,) + tuple(range(2, x.ndim))
            ga = neg_part.sum(axis=axes).reshape(a.shape)
        return (gx, ga)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, slope), back)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Rows are interpolation weights using half-pixel centres, no corner alignment."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("output extents must be positive")
    h, w = x.shape[-2:]
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(w, out_w, x.dtype)
    out = mh @ x.data @ mw.T
    return Tensor.from_op(out, (x,), lambda g: (mh.T @ g @ mw,))


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return Tensor.from_op(
        x.data.mean(axis=(2, 3), keepdims=True), (x,),
        lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim > 2 and b.ndim > 2:
        raise ConfigurationError(f"batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _add_macs(out.size * a.shape[-1])

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor.from_op(out, (a, b), back)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
