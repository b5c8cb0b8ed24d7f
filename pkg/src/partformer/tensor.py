"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive is a forward function that records an ``op``
name plus whatever values its adjoint needs. Adjoints live in the ``ADJOINTS``
registry and are looked up when ``backward`` replays the graph, so a single
entry can be swapped out (e.g. to prove that the gradient checker notices).

Shapes must match exactly, with one exception: the right operand of ``add``,
``sub`` and ``mul`` may have a shape equal to a trailing suffix of the left
operand's shape (bias vectors, position tables). Anything else needs an
explicit ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ADJOINTS",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "getitem",
    "concat",
    "broadcast_to",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "abs",
    "square",
    "clamp_min",
    "softplus",
    "gelu",
    "softmax",
    "log_softmax",
    "layernorm",
    "pairwise_sqdist",
    "trace",
    "TapeEntry",
    "grad_check",
    "grad_check_params",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "saved", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.saved: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return swap_last(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor.

        ``grad`` defaults to ones for a single-element tensor. Gradients are
        accumulated into ``.grad`` of every reachable tensor that requires one.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node.op is None:
                continue
            grads = ADJOINTS[node.op](node, g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"adjoint of {node.op} produced shape {pg.shape} for input of shape {parent.shape}"
                    )
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], saved: tuple = ()) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.saved = saved
    return out


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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass(frozen=True)
class TapeEntry:
    op: str | None
    inputs: tuple[int, ...]
    output: int


def trace(root: Tensor) -> list[TapeEntry]:
    """The recorded graph behind ``root`` in the order adjoints are replayed."""
    order = _topo_order(root)
    ids = {id(t): i for i, t in enumerate(order)}
    return [
        TapeEntry(t.op, tuple(ids[id(p)] for p in t.parents if id(p) in ids), ids[id(t)])
        for t in reversed(order)
    ]


ADJOINTS: dict[str, Callable[[Tensor, np.ndarray], tuple]] = {}


def adjoint(name: str):
    def register(fn):
        ADJOINTS[name] = fn
        return fn

    return register


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match (only trailing-suffix broadcast allowed)")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix("add", a, b)
    return _node(a.data + b.data, "add", (a, b))


@adjoint("add")
def _add_bw(out, g):
    a, b = out.parents
    return g, _reduce_to(g, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b))


@adjoint("sub")
def _sub_bw(out, g):
    a, b = out.parents
    return g, -_reduce_to(g, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b))


@adjoint("mul")
def _mul_bw(out, g):
    a, b = out.parents
    return g * b.data, _reduce_to(g * a.data, b.shape)


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, "neg", (x,))


@adjoint("neg")
def _neg_bw(out, g):
    return (-g,)


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * x.dtype.type(c), "scale", (x,), (float(c),))


@adjoint("scale")
def _scale_bw(out, g):
    return (g * g.dtype.type(out.saved[0]),)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _node(x.data + x.dtype.type(c), "add_scalar", (x,))


@adjoint("add_scalar")
def _add_scalar_bw(out, g):
    return (g,)


def exp(x: Tensor) -> Tensor:
    return _node(np.exp(x.data), "exp", (x,))


@adjoint("exp")
def _exp_bw(out, g):
    return (g * out.data,)


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), "log", (x,))


@adjoint("log")
def _log_bw(out, g):
    return (g / out.parents[0].data,)


def sqrt(x: Tensor) -> Tensor:
    return _node(np.sqrt(x.data), "sqrt", (x,))


@adjoint("sqrt")
def _sqrt_bw(out, g):
    return (g * 0.5 / out.data,)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _node(np.abs(x.data), "abs", (x,))


@adjoint("abs")
def _abs_bw(out, g):
    return (g * np.sign(out.parents[0].data),)


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, "square", (x,))


@adjoint("square")
def _square_bw(out, g):
    return (2 * g * out.parents[0].data,)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return _node(np.maximum(x.data, x.dtype.type(lo)), "clamp_min", (x,), (lo,))


@adjoint("clamp_min")
def _clamp_min_bw(out, g):
    return (g * (out.parents[0].data > out.saved[0]),)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated without overflow."""
    return _node(np.logaddexp(0, x.data), "softplus", (x,))


@adjoint("softplus")
def _softplus_bw(out, g):
    x = out.parents[0].data
    return (g * (0.5 * (1 + np.tanh(0.5 * x))),)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
    return _node(0.5 * v * (1 + t), "gelu", (x,), (t,))


@adjoint("gelu")
def _gelu_bw(out, g):
    v = out.parents[0].data
    (t,) = out.saved
    dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * v * v)
    return (g * (0.5 * (1 + t) + 0.5 * v * dt),)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    return _node(np.sum(x.data, axis=axes, keepdims=keepdims), "sum", (x,), (axes, keepdims))


@adjoint("sum")
def _sum_bw(out, g):
    x = out.parents[0]
    axes, keepdims = out.saved
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b))


@adjoint("matmul")
def _matmul_bw(out, g):
    a, b = out.parents
    ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
    return ga, gb


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _node(np.transpose(x.data, axes), "transpose", (x,), (axes,))


@adjoint("transpose")
def _transpose_bw(out, g):
    return (np.transpose(g, np.argsort(out.saved[0])),)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(tuple(shape)), "reshape", (x,))


@adjoint("reshape")
def _reshape_bw(out, g):
    return (g.reshape(out.parents[0].shape),)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic slicing or integer-array gather; the adjoint scatters with accumulation."""
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    return _node(x.data[idx], "getitem", (x,), (idx,))


@adjoint("getitem")
def _getitem_bw(out, g):
    x = out.parents[0]
    (idx,) = out.saved
    gx = np.zeros(x.shape, dtype=g.dtype)
    if _is_basic_index(idx):
        gx[idx] += g
    else:
        np.add.at(gx, idx, g)
    return (gx,)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[d] != xs[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    return _node(np.concatenate([t.data for t in xs], axis=axis), "concat", xs, (axis, sizes))


@adjoint("concat")
def _concat_bw(out, g):
    axis, sizes = out.saved
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit NumPy-style broadcast; the adjoint sums back over expanded axes."""
    shape = tuple(shape)
    return _node(np.broadcast_to(x.data, shape).copy(), "broadcast_to", (x,))


@adjoint("broadcast_to")
def _broadcast_bw(out, g):
    x = out.parents[0]
    lead = g.ndim - x.ndim
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


# ---------------------------------------------------------------- composite kernels


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _node(e / e.sum(axis=-1, keepdims=True), "softmax", (x,))


@adjoint("softmax")
def _softmax_bw(out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _node(z - lse, "log_softmax", (x,))


@adjoint("log_softmax")
def _log_softmax_bw(out, g):
    p = np.exp(out.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


LN_EPS = 1e-6


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    c = x.shape[-1]
    if c < 2:
        raise ShapeError(f"layernorm needs at least 2 channels, got {c}")
    for p in (gain, bias):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layernorm: affine shape {p.shape} does not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = (x,) + tuple(p for p in (gain, bias) if p is not None)
    return _node(y.astype(x.dtype, copy=False), "layernorm", parents, (xhat, inv, gain is not None, bias is not None))


@adjoint("layernorm")
def _layernorm_bw(out, g):
    xhat, inv, has_gain, has_bias = out.saved
    x = out.parents[0]
    grads = []
    gh = g * out.parents[1].data if has_gain else g
    gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    grads.append(gx if x.requires_grad else None)
    if has_gain:
        grads.append(_reduce_to(g * xhat, (xhat.shape[-1],)))
    if has_bias:
        grads.append(_reduce_to(g, (xhat.shape[-1],)))
    return tuple(grads)


def pairwise_sqdist(x: Tensor) -> Tensor:
    """(B, c) -> (B, B) squared Euclidean distances; the diagonal is exactly zero."""
    if x.ndim != 2:
        raise ShapeError(f"pairwise_sqdist expects (B, c), got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    return _node(np.einsum("ijc,ijc->ij", diff, diff), "pairwise_sqdist", (x,), (diff,))


@adjoint("pairwise_sqdist")
def _pairwise_sqdist_bw(out, g):
    (diff,) = out.saved
    w = g + g.T
    return (2 * np.einsum("ij,ijc->ic", w, diff),)


# ---------------------------------------------------------------- finite differences


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |central difference|).

    ``coords`` restricts the comparison to a subset of flat indices of ``x``.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got output shape {y.shape}")
    y.backward()
    ad = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    return _fd_compare(lambda: f(x), x, ad, step, coords)


def _fd_compare(f0, x: Tensor, ad: np.ndarray, step: float, coords) -> float:
    flat = x.data.reshape(-1)
    ad = ad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f0().data.sum())
            flat[i] = orig - step
            fm = float(f0().data.sum())
            flat[i] = orig
            fd = (fp - fm) / (2 * step)
            worst = max(worst, float(np.abs(ad[i] - fd) / max(1.0, np.abs(fd))))
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error for a closure over ``params``.

    With ``max_coords`` set, each parameter is probed at that many randomly
    chosen coordinates instead of all of them.
    """
    for p in params.values():
        p.grad = None
    y = f()
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got output shape {y.shape}")
    y.backward()
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        ad = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        report[name] = _fd_compare(f, p, ad, step, coords)
    return report
