"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradTape` is active and at least
one input requires a gradient, so inference runs without graph overhead::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = (x @ w).sum()
    grads = tape.backward(loss)
    grads[w.node_id]          # -> Tensor of shape (3, 2)
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_active_tapes: list["GradTape"] = []


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __deepcopy__(self, memo):
        # fresh node id: copies must never alias on a tape
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of differentiable operations.

    Nodes are appended as they are created, so the list is already in
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._members: set[int] = set()
        self.gradients: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._members.add(node.node_id)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._members

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        return backward(loss, self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _active_tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        _active_tapes[-1].record(out)
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[int, Tensor]:
    """Reverse sweep over ``tape``; returns gradients of every requires-grad leaf.

    Leaf ``.grad`` attributes are overwritten (not accumulated), so replaying
    the same tape gives identical results.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss is not recorded on this tape (detached or computed outside it)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                leaves[parent.node_id] = parent
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    result: dict[int, Tensor] = {}
    for nid, leaf in leaves.items():
        g = grads[nid]
        leaf.grad = g
        result[nid] = Tensor(g)
    tape.gradients = result
    return result


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1] == b.shape[0]:
        return add_bias(a, b)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-``n`` vector to every row of ``x[..., n]``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array, e.g. an attention mask."""
    return _result(x.data + c, (x,), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,))


# ------------------------------------------------------------------ reductions


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def add_all(terms: Iterable[Tensor]) -> Tensor:
    """Sum a list of same-shaped tensors with one graph node."""
    terms = list(terms)
    data = terms[0].data.copy()
    for t in terms[1:]:
        _check_same(terms[0], t, "add_all")
        data = data + t.data
    return _result(data, terms, lambda g: tuple(g for _ in terms))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-D operands are treated as stacks with a shared leading axis."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        other = tuple(s for i, s in enumerate(p.shape) if i != ax)
        ref = tuple(s for i, s in enumerate(parts[0].shape) if i != ax)
        if other != ref:
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {ax}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, bw)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of two ``T x d`` sequences."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features: time lengths differ ({a.shape[0]} vs {b.shape[0]})")
    return concat([a, b], axis=1)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along axis 0. ``index`` may be any integer array."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _result(x.data[..., start:stop], (x,), bw)


# ------------------------------------------------------------ normalisations


def logsumexp(d: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(d, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(d - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    d = x.data
    out = d - logsumexp(d, axis=-1, keepdims=True)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    axes = tuple(range(d.ndim - 1))

    def bw(g):
        gx = g * gain.data
        n = d.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gain, bias), bw)


# ----------------------------------------------------------- gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray, eps: float = 1e-5,
                     coords: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``coords`` restricts evaluation to some flat indices; other entries are NaN.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)

    def value(arr):
        v = f(Tensor(arr.reshape(base.shape)))
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in range(flat.size) if coords is None else coords:
        keep = flat[i]
        flat[i] = keep + eps
        hi = value(flat)
        flat[i] = keep - eps
        lo = value(flat)
        flat[i] = keep
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``, ignoring NaN entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    if not mask.any():
        return 0.0
    a, n = a[mask], n[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
