"""Dense tensors with reverse-mode differentiation over NumPy arrays.

Forward values are plain ndarrays. Any result that depends on a tensor
with `requires_grad` records its parents and a vector-Jacobian closure;
`backward` replays the trace in reverse topological order. Trace order
is fixed by construction order, so repeated runs over the same graph
accumulate gradients in the same order and produce bitwise-identical
results.

A module-global default dtype selects fp32 (default) or fp64
(verification mode, see `use_dtype`). Optional post-op NaN/Inf scans
can be switched on for debugging via `set_nan_checks`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Operand values lie outside the op's domain (e.g. log of <= 0)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""


_default_dtype = np.float32
_nan_checks = False


def default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    global _default_dtype
    _default_dtype = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (fp64 = verification mode)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_nan_checks(enabled: bool) -> None:
    global _nan_checks
    _nan_checks = bool(enabled)


@contextmanager
def nan_checks(enabled: bool = True):
    prev = _nan_checks
    set_nan_checks(enabled)
    try:
        yield
    finally:
        set_nan_checks(prev)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff.

    Instances are identity-hashed; `data` must only be mutated through
    optimizer steps (never mid-graph).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.name = name

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; scalars fold into the closure instead of becoming nodes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; use mul + reciprocal scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if _nan_checks and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    """Wrap an op result; record the trace only if a parent needs grads."""
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo broadcasting: reduce g down to `shape` by summing."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    data = a.data + b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _sum_to_shape(g, ash) if a.requires_grad else None
        gb = _sum_to_shape(g, bsh) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    data = a.data - b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _sum_to_shape(g, ash) if a.requires_grad else None
        gb = -_sum_to_shape(g, bsh) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _sum_to_shape(g * bd, ad.shape) if a.requires_grad else None
        gb = _sum_to_shape(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def vjp(g):
        return (g * c,)

    return _node(a.data * c, (a,), vjp, "scale")


def shift(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def vjp(g):
        return (g,)

    return _node(a.data + c, (a,), vjp, "shift")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims broadcast as in NumPy."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to_shape(g @ bd.swapaxes(-1, -2), ad.shape)
        if b.requires_grad:
            gb = _sum_to_shape(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _node(data, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    ash = a.shape

    def vjp(g):
        return (g.reshape(ash),)

    return _node(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), vjp, "transpose")


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    needs = [p.requires_grad for p in parts]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _node(data, tuple(parts), vjp, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing only (slices / ellipsis, no int collapse, no fancy)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) and k is not Ellipsis:
            raise ShapeError("only slice/ellipsis indexing is differentiable here")
    data = a.data[key]
    ash, adt = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(ash, dtype=adt)
        full[key] = g
        return (full,)

    return _node(data, (a,), vjp, "slice")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"gather_rows ids must be integer, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows ids out of range [0, {table.shape[0]})")
    data = table.data[ids]
    tsh, tdt = table.shape, table.data.dtype

    def vjp(g):
        full = np.zeros(tsh, dtype=tdt)
        np.add.at(full, ids, g)
        return (full,)

    return _node(data, (table,), vjp, "gather_rows")


def select_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] with idx.shape == a.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"select_last: idx shape {idx.shape} != {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"select_last idx out of range [0, {a.shape[-1]})")
    expanded = idx[..., None]
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]
    ash, adt = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(ash, dtype=adt)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _node(data, (a,), vjp, "select_last")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ash).astype(g.dtype, copy=True),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % len(ash) for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, ash).astype(g.dtype, copy=True),)

    return _node(data, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    data = np.where(mask, a.data, a.data.dtype.type(0))

    def vjp(g):
        return (np.where(mask, g, g.dtype.type(0)),)

    return _node(data, (a,), vjp, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _stable_sigmoid(a.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _node(data, (a,), vjp, "sigmoid")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _node(np.log(ad), (a,), vjp, "log")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free."""
    data = np.logaddexp(a.data.dtype.type(0), a.data)
    sig = _stable_sigmoid(a.data)

    def vjp(g):
        return (g * sig,)

    return _node(data, (a,), vjp, "softplus")


# ---------------------------------------------------------------------------
# fused softmax family (closed-form VJPs keep graphs small)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(data, (a,), vjp, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({x.shape[-1]},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    d = x.shape[-1]
    gdat = gamma.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gy = g * gdat
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL of integer targets under softmax(logits) over the last axis."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} != {logits.shape[:-1]}"
        )
    picked = select_last(log_softmax(logits, axis=-1), targets)
    return neg(mean(picked))


def kl_divergence(p_logits: Tensor, q_logits: Tensor, axis: int = -1) -> Tensor:
    """KL(softmax(p) || softmax(q)) summed over `axis`, keeping other dims."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(
            f"kl_divergence: shapes differ {p_logits.shape} vs {q_logits.shape}"
        )
    lp = log_softmax(p_logits, axis=axis)
    lq = log_softmax(q_logits, axis=axis)
    p = softmax(p_logits, axis=axis)
    return sum_(mul(p, sub(lp, lq)), axis=axis)


# ---------------------------------------------------------------------------
# graph trace and reverse pass


class Graph:
    """Deterministic topological ordering of a traced subgraph."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        """Iterative postorder DFS; parent order fixed by op construction."""
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        seen.add(id(root))
        while stack:
            node, i = stack[-1]
            parents = node._parents
            if i < len(parents):
                stack[-1] = (node, i + 1)
                p = parents[i]
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    stack.append((p, 0))
            else:
                nodes.append(node)
                stack.pop()
        return Graph(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar loss.

    Returns gradients for every reachable leaf with requires_grad, keyed
    by tensor identity, and mirrors them onto `.grad`. Gradients of a
    leaf used multiple times accumulate by summation.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node] = g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _finite_or_raise(pg, "backward")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    for t, g in leaves.items():
        t.grad = g
    return leaves
