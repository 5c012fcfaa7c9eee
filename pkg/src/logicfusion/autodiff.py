"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Graphs are
define-by-run: a fresh graph is built for every sentence.

Leaf tensors (parameters) accumulate gradients across calls to
:func:`backward`; the caller is responsible for zeroing them between steps.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DimensionError",
    "Graph",
    "GradCheckReport",
    "Tensor",
    "backward",
    "concat",
    "dropout",
    "grad_check",
    "log",
    "log_softmax",
    "matmul",
    "no_grad",
    "segment_sum",
    "sigmoid",
    "softmax",
    "stack",
    "tanh",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _active_graph() -> "Graph | None":
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Graph:
    """Tape of op nodes created while the graph is active.

    Nodes are appended at creation time, so the tape is a topological order
    and walking it backwards visits every node after all of its consumers.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.graphs.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Backpropagate using the tape order instead of a graph search.

        Every op node reachable from ``loss`` must have been recorded on this
        tape; leaves created outside the graph are fine.
        """
        _run_backward(loss, self.nodes)


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        """Create an op node.

        ``backward_fn`` receives the output gradient and returns one gradient
        (or ``None``) per parent, in order.  This is also the extension point
        for fused ops defined outside this module.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
            graph = _active_graph()
            if graph is not None:
                graph.nodes.append(out)
        else:
            out.requires_grad = False
            out.parents = ()
            out.backward_fn = None
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward pass
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
        if id(node) in seen or node.backward_fn is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.backward_fn is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True).reshape(leaf.data.shape)
    else:
        leaf.grad = leaf.grad + g


def _run_backward(loss: Tensor, order: Iterable[Tensor]) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.backward_fn is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    _run_backward(loss, _topo_order(loss))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.data.shape, b.data.shape
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.data.shape, b.data.shape
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise product; a plain number scales."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        a = _as_tensor(a)
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last by default); other dims must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim if ndim else 0
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor.from_op(data, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) > 1:
        raise DimensionError(f"stack: unequal shapes {[t.shape for t in tensors]}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor.from_op(
        data,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if (
        ad.ndim < 2
        or bd.ndim < 2
        or ad.shape[-1] != bd.shape[-2]
        or ad.shape[:-2] != bd.shape[:-2]
    ):
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    return Tensor.from_op(
        ad @ bd,
        (a, b),
        lambda g: (g @ _swap_last(bd), _swap_last(ad) @ g),
        "matmul",
    )


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from None
    return Tensor.from_op(data, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor.from_op(data, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    shape = a.data.shape
    data = a.data[index]

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(np.array(data, dtype=np.float64), (a,), bw, "getitem")


def take_rows(table: Tensor, rows) -> Tensor:
    """Row gather, the embedding lookup."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = table.data.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return Tensor.from_op(table.data[rows], (table,), bw, "take_rows")


def segment_sum(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Sum rows (leading-axis entries) of ``values`` into ``n_segments`` buckets."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.zeros((n_segments,) + values.data.shape[1:])
    np.add.at(out, ids, values.data)
    return Tensor.from_op(out, (values,), lambda g: (g[ids],), "segment_sum")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape
    data = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(data, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor.from_op(
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
        "softmax",
    )


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor.from_op(
        y,
        (x,),
        lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
        "log_softmax",
    )


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Max relative error per parameter between analytic and numeric grads."""

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float] | None:
        if not self.errors:
            return None
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call.  Raises ``FloatingPointError`` naming the parameter when the loss or
    a gradient is not finite.
    """
    if not isinstance(params, Mapping):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    report = GradCheckReport(tol=tol)
    if not params:
        return report

    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite at the base point")
    backward(loss)

    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.isfinite(analytic).all():
            raise FloatingPointError(f"non-finite analytic gradient for {name!r}")
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss while perturbing {name!r}[{i}]")
                num_flat[i] = (up - down) / (2.0 * h)
        err = relative_error(analytic, numeric, floor)
        report.errors[name] = float(err.max()) if err.size else 0.0
    for p in params.values():
        p.zero_grad()
    return report
