"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Only the operations needed by the encoder, the contrastive losses and the
linear probe are provided. Broadcasting is limited to scalar-vs-tensor.

Usage::

    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = sum_(x * x)
    grads = backward(loss)      # {x: array([2., 4.])}

Every differentiable op appends a node to the active :class:`Graph`. A
graph is consumed by :func:`backward` and then cleared, so a fresh tape is
built on every forward pass.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Graph",
    "GradCheck",
    "active_graph",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "neg",
    "relu",
    "clamp_floor_zero",
    "clamp_min",
    "clip",
    "sqrt",
    "sum_",
    "mean",
    "reduce",
    "log_sum_exp",
    "batchnorm",
    "reshape",
    "transpose",
    "index",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """Immutable dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_node")
    # make ``ndarray op Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._graph = None
        t._node = None
        return t

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
    def node_ref(self) -> int | None:
        return self._node

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    kind: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class Graph:
    """Append-only tape of recorded operations.

    Inputs of a node always precede it, so reverse append order is a valid
    reverse topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._graph = None
            node.output._node = None
        self.nodes = []

    def record(self, kind: str, output: Tensor, inputs: tuple[Tensor, ...], fn: Backward) -> None:
        output._graph = self
        output._node = len(self.nodes)
        self.nodes.append(Node(kind, output, inputs, fn))

    def __enter__(self) -> "Graph":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()


class _State(threading.local):
    def __init__(self) -> None:
        self.stack: list[Graph] = [Graph()]
        self.enabled = True


_local = _State()


def _state() -> _State:
    return _local


def active_graph() -> Graph:
    """Return the graph new operations are recorded into."""
    return _state().stack[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; outputs never require gradients."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Backward) -> Tensor:
    st = _state()
    needs = st.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        st.stack[-1].record(kind, out, inputs, fn)
    return out


def _safe_scale(g: np.ndarray, factor: np.ndarray) -> np.ndarray:
    # zero upstream gradient stays zero even where factor is inf
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = g * factor
    return np.where(g == 0.0, 0.0, out)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        return g @ B.T, A.T @ g

    return _make("matmul", A @ B, (a, b), fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def index(a, key) -> Tensor:
    """Gather with numpy basic or advanced indexing; scatter-add on backward."""
    a = _as_tensor(a)
    src = a.shape

    def fn(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", a.data[key], (a,), fn)


# ---------------------------------------------------------------- elementwise


def _check_pair(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "mul")
    A, B = a.data, b.data

    def fn(g):
        return _unbroadcast(_safe_scale(g, B), A.shape), _unbroadcast(_safe_scale(g, A), B.shape)

    return _make("mul", A * B, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b, "div")
    A, B = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = A / B

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _safe_scale(g, 1.0 / B)
            gb = _safe_scale(g, -A / (B * B))
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _make("div", out, (a, b), fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a, b, kind: str) -> Tensor:
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _floor_zero(a, kind: str) -> Tensor:
    a = _as_tensor(a)
    live = a.data > 0.0
    return _make(kind, np.where(live, a.data, 0.0), (a,), lambda g: (np.where(live, g, 0.0),))


def relu(a) -> Tensor:
    """max(0, a); the subgradient at exactly 0 is 0."""
    return _floor_zero(a, "relu")


def clamp_floor_zero(a) -> Tensor:
    """Same kernel as :func:`relu`, recorded separately to mark hinge terms."""
    return _floor_zero(a, "clamp_floor_zero")


def clamp_min(a, lo: float) -> Tensor:
    a = _as_tensor(a)
    live = a.data > lo
    return _make("clamp_min", np.where(live, a.data, lo), (a,), lambda g: (np.where(live, g, 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    live = (a.data > lo) & (a.data < hi)
    out = np.clip(a.data, lo, hi)
    return _make("clip", out, (a,), lambda g: (np.where(live, g, 0.0),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore"):
            return (_safe_scale(g, 0.5 / out),)

    return _make("sqrt", out, (a,), fn)


# ---------------------------------------------------------------- reductions


def _check_axis(a: Tensor, axis: int | None, kind: str) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(a, axis, "sum")
    shape = a.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", a.data.sum(axis=axis), (a,), fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(a, axis, "mean")
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", a.data.mean(axis=axis), (a,), fn)


def reduce(a, kind: str, axis: int | None = None) -> Tensor:
    if kind == "sum":
        return sum_(a, axis)
    if kind == "mean":
        return mean(a, axis)
    raise ContractError(f"unknown reduction {kind!r}")


def log_sum_exp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis``.

    ``mask`` (boolean, same shape as ``a``) selects the entries that take
    part; excluded entries receive zero gradient.
    """
    a = _as_tensor(a)
    axis = _check_axis(a, axis, "log_sum_exp")
    keep = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"log_sum_exp: mask shape {keep.shape} does not match {a.shape}")
    if a.shape[axis] == 0 or not keep.any(axis=axis).all():
        raise DomainError("log_sum_exp: empty reduction along axis")
    x = np.where(keep, a.data, -np.inf)
    top = x.max(axis=axis, keepdims=True)
    w = np.exp(x - top)
    s = w.sum(axis=axis, keepdims=True)
    out = np.squeeze(top + np.log(s), axis=axis)
    soft = w / s

    def fn(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make("log_sum_exp", out, (a,), fn)


# ---------------------------------------------------------------- batch norm


def batchnorm(
    a,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Batch normalization over the rows of an N x C tensor.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if a.ndim != 2 or gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise DimensionError(
            f"batchnorm: input {a.shape} with gamma {gamma.shape} and beta {beta.shape}"
        )
    x, G, B = a.data, gamma.data, beta.data
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise DomainError(f"batchnorm: train mode needs at least 2 rows, got {n}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    elif mode == "eval":
        mu = np.array(running_mean, dtype=np.float64)
        var = np.array(running_var, dtype=np.float64)
    else:
        raise ContractError(f"batchnorm: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mu) * inv_std
    out = xhat * G + B

    def fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * G
        if mode == "train":
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make("batchnorm", out, (a, gamma, beta), fn)


# ---------------------------------------------------------------- backward


def backward(root: Tensor, graph: Graph | None = None, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every leaf that requires a gradient.

    Returns a map from leaf tensor to its gradient and also stores each
    gradient on ``leaf.grad``. The graph is cleared afterwards unless
    ``retain_graph`` is set.
    """
    if root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    if root._node is None:
        g = np.ones(root.shape)
        root.grad = g
        return {root: g}
    if graph is None:
        graph = root._graph
    elif graph is not root._graph:
        raise ContractError("backward: root does not belong to the given graph")

    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(graph.nodes[: root._node + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                prev = leaves.get(key)
                leaves[key] = (inp, ig if prev is None else prev[1] + ig)
            else:
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig
    if not retain_graph:
        graph.clear()
    result = {}
    for t, g in leaves.values():
        t.grad = g
        result[t] = g
    return result


@dataclass(frozen=True)
class GradCheck:
    """Outcome of :func:`finite_diff_check`."""

    max_error: float
    worst_index: tuple[int, ...] | None
    nonfinite_index: tuple[int, ...] | None = None

    @property
    def ok(self) -> bool:
        return self.nonfinite_index is None and np.isfinite(self.max_error)

    def __float__(self) -> float:
        return self.max_error


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> GradCheck:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with Graph():
        grads = backward(f(xt))
    analytic = grads.get(xt, np.zeros_like(x0))

    worst, where = 0.0, None
    for idx in np.ndindex(*x0.shape):
        vals = []
        for step in (h, -h):
            xp = x0.copy()
            xp[idx] += step
            with no_grad():
                v = f(Tensor(xp)).item()
            if not np.isfinite(v):
                return GradCheck(float("inf"), idx, idx)
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        if err > worst or where is None:
            worst, where = err, idx
    return GradCheck(float(worst), where)
