"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (row-major, C-contiguous).  Every op that touches a
grad-enabled input appends one record to the thread-local tape; ``backward``
replays the tape in reverse, visiting each record once, and clears it.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> grads = backward((x * x).sum())
    >>> grads[x]
    array([2., 2., 2.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "SingularityError",
    "DomainError",
    "NumericError",
    "ContractError",
    "as_tensor",
    "parameter",
    "no_grad",
    "current_tape",
    "backward",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "reduce",
    "activation",
    "silu",
    "gelu",
    "sigmoid",
    "softplus",
    "softmax",
    "layernorm",
    "log",
    "exp",
    "sqrt",
    "tanh",
    "clamp_min",
    "normalize",
    "concat",
    "take_rows",
    "conv2d",
    "svd_values",
    "numerical_grad",
    "max_rel_error",
    "gradcheck",
    "power",
    "reshape",
    "transpose",
    "getitem",
]

LAYERNORM_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularityError(ArithmeticError):
    """Division by a (numerically) zero entry."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op."""


class NumericError(ArithmeticError):
    """Iterative routine failed to converge."""


class ContractError(ValueError):
    """Caller violated an API precondition."""


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op records for one backward pass; owned by one thread."""

    nodes: list = field(default_factory=list)

    def record(self, out: "Tensor", inputs: tuple, vjp) -> None:
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, vjp))

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_mode() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_mode()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _unary(self, np.negative(self.data), lambda g: (-g,))

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(a, b):
    """Coerce a mixed (Tensor, scalar/array) pair to tensors of one dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return Tensor(np.asarray(a, dtype=b.dtype)), b


def _make(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if data.dtype != inputs[0].dtype:
        data = data.astype(inputs[0].dtype)
    needs = _grad_mode() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, vjp)
    return out


def _unary(x: Tensor, data: np.ndarray, vjp) -> Tensor:
    return _make(data, (x,), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(np.abs(bd) < np.finfo(bd.dtype).tiny):
        raise SingularityError("division by an entry below the smallest normal number")
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a, b, op: str) -> Tensor:
    try:
        return _BINARY[op](a, b)
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _unary(x, xd**p, lambda g: (g * p * xd ** (p - 1),))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if bd.ndim == 2:
        # shared weight matrix: fold the batch axes into rows
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

    else:
        out = np.matmul(ad, bd)

        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if need_a else None
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if need_b else None
            return ga, gb

    return _make(out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    need_x = x.requires_grad

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if need_x else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce(x: Tensor, op: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    shape = xd.shape

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if op == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        return _unary(x, out, lambda g: (np.broadcast_to(expand(g), shape).copy(),))
    if op == "mean":
        count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
        out = xd.mean(axis=axes, keepdims=keepdims)
        return _unary(x, out, lambda g: (np.broadcast_to(expand(g) / count, shape).copy(),))
    if op == "max":
        out = xd.max(axis=axes, keepdims=True)
        hit = (xd == out).astype(xd.dtype)
        hit /= hit.sum(axis=axes, keepdims=True)
        res = out if keepdims else np.squeeze(out, axis=axes)
        return _unary(x, res, lambda g: (expand(g) * hit,))
    raise ContractError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a non-positive entry")
    return _unary(x, np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd < 0):
        raise DomainError("sqrt of a negative entry")
    out = np.sqrt(xd)
    return _unary(x, out, lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: (g * (1 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _unary(x, out, lambda g: (g * out * (1 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0, xd)
    return _unary(x, out, lambda g: (g * _sigmoid(xd),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _unary(x, xd * s, lambda g: (g * s * (1 + xd * (1 - s)),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    # in-place chains: these arrays are the largest activations in the model
    th = xd * xd
    th *= 0.044715
    th += 1
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1
    out *= xd
    out *= 0.5

    def vjp(g):
        d = xd * xd
        d *= 3 * 0.044715
        d += 1
        d *= _GELU_C
        s = th * th
        np.subtract(1, s, out=s)
        s *= xd
        s *= d
        s *= 0.5
        s += 0.5
        d = np.multiply(th, 0.5, out=d)
        s += d
        s *= g
        return (s,)

    return _unary(x, out, vjp)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    xd = x.data
    keep = xd >= lo
    return _unary(x, np.where(keep, xd, lo).astype(xd.dtype), lambda g: (g * keep,))


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _unary(x, out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - y * gym),)

    return _unary(x, y, vjp)


def normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each last-axis vector to unit length; the norm is floored at ``eps``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = xd / denom

    def vjp(g):
        radial = np.where(big, y * (y * g).sum(axis=-1, keepdims=True), 0)
        return ((g - radial) / denom,)

    return _unary(x, y, vjp)


_ACTIVATIONS = {
    "silu": silu,
    "gelu-tanh": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "sigmoid": sigmoid,
    "log": log,
}


def activation(x: Tensor, op: str) -> Tensor:
    try:
        return _ACTIVATIONS[op](x)
    except KeyError:
        raise ContractError(f"unknown activation {op!r}") from None


# ---------------------------------------------------------------------------
# shape ops (all produce fresh contiguous storage)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _unary(x, out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _unary(x, out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    out = np.array(x.data[idx], copy=True)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _unary(x, out, vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    axis = axis % xs[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[idx]`` with scatter-add gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _unary(table, table.data[idx], vjp)


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIHW kernel."""
    x, kernel = _lift(x, kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    b, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = _pad(x.data, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # b, c, oh, ow, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    kshape = kernel.shape

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gk = (g2.T @ cols).reshape(kshape)
        gcols = (g2 @ kmat).reshape(b, oh, ow, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) for every grad-enabled leaf reachable from ``loss``.

    Returns a dict keyed by the leaf tensors; also adds into each leaf's
    ``.grad``.  The tape is cleared afterwards.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad or loss._node is None:
        tape.clear()
        raise ContractError("loss is not connected to any grad-enabled leaf")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for node in reversed(tape.nodes[: loss._node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._node is None:
                    leaves[key] = inp
    finally:
        tape.clear()

    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# singular values (one-sided Jacobi)


def _round_robin(n: int):
    """Disjoint index pairs covering every (i, j) once over n-1 rounds (n even)."""
    idx = list(range(n))
    for _ in range(n - 1):
        half = n // 2
        yield np.array(idx[:half]), np.array(idx[half:][::-1])
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]


def svd_values(a, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values of a 2-D array, descending.

    One-sided (Hestenes) Jacobi: rotate column pairs until every pair is
    orthogonal to relative tolerance ``tol``; the column norms are then the
    singular values.  Forward-only.
    """
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim != 2:
        raise DimensionError("svd_values expects a 2-D matrix")
    m, n = arr.shape
    if m * n > 10**6:
        raise ContractError(f"matrix too large for desk-scale SVD: {m}x{n}")
    u = np.array(arr, dtype=np.float64)
    if m < n:
        u = u.T.copy()
    k = u.shape[1]
    if k == 0:
        return np.zeros(0)
    if k % 2:
        u = np.concatenate([u, np.zeros((u.shape[0], 1))], axis=1)
    cols = u.shape[1]
    # columns below this squared norm are roundoff left over from a rank deficit
    floor = (np.finfo(np.float64).eps * max(m, n)) ** 2 * np.einsum("ij,ij->", u, u)

    for _ in range(max_sweeps):
        rotated = False
        for p, q in _round_robin(cols):
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            scale = np.sqrt(alpha * beta)
            act = (np.minimum(alpha, beta) > floor) & (np.abs(gamma) > tol * scale)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            up, uq = up[:, act], uq[:, act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2 * gamma)
            with np.errstate(over="ignore"):
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta))
            c = 1 / np.sqrt(1 + t * t)
            s = c * t
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
        if not rotated:
            sv = np.sqrt(np.einsum("ij,ij->j", u, u))[:k]
            return np.sort(sv)[::-1]
    raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


# ---------------------------------------------------------------------------
# finite-difference utilities


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Componentwise |a - n| / max(|a|, floor), maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), floor))) if a.size else 0.0


def gradcheck(build: Callable[[Sequence[Tensor]], Tensor], arrays: Iterable[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``build`` maps a list of leaf tensors to a scalar tensor.  Arrays are
    float64 and are perturbed in place during the numeric pass.
    """
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(build(leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(arrays[i]))

        def f():
            with no_grad():
                return build([Tensor(a, requires_grad=True) for a in arrays]).item()

        numeric = numerical_grad(f, arrays[i], h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
