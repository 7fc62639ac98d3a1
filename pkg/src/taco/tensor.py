"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every primitive is a function that computes
its forward value with numpy and, when any input requires gradients, records a
closure that maps the output gradient to input gradients.  ``backward`` walks
the recorded graph in reverse topological order.

Two pieces of instrumentation live here as well because every other module
routes its arithmetic through this one:

* a multiply-accumulate counter (``count_flops``) with named scopes, used to
  check the analytic attention cost model, and
* a peak-allocation probe (``measure_peak_bytes``) built on ``tracemalloc``;
  numpy reports its buffers to the tracer, so the probe sees every array the
  engine allocates.
"""

from __future__ import annotations

import contextlib
import threading
import tracemalloc
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5
DEFAULT_DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy buffer plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; all of it funnels into the primitives below.
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# FLOP accounting


@dataclass
class FlopCounter:
    """Multiply-accumulate totals keyed by the active scope name."""

    macs: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self) -> int:
        return int(sum(self.macs.values()))

    def get(self, key: str) -> int:
        return int(self.macs.get(key, 0))

    def prefixed(self, prefix: str) -> int:
        return int(sum(v for k, v in self.macs.items() if k.startswith(prefix)))


def _counters() -> list[FlopCounter]:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


def _scopes() -> list[str]:
    if not hasattr(_state, "scopes"):
        _state.scopes = []
    return _state.scopes


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Collect multiply-accumulates performed on this thread inside the block."""
    counter = FlopCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    _scopes().append(name)
    try:
        yield
    finally:
        _scopes().pop()


def record_macs(n: int, tag: str | None = None) -> None:
    """Attribute ``n`` multiply-accumulates to ``tag`` (default: innermost scope)."""
    counters = _counters()
    if not counters:
        return
    if tag is None:
        scopes = _scopes()
        tag = scopes[-1] if scopes else "other"
    for c in counters:
        c.macs[tag] += int(n)


# ---------------------------------------------------------------------------
# Peak memory probe


@dataclass
class PeakMemory:
    peak_bytes: int = 0
    baseline_bytes: int = 0


@contextlib.contextmanager
def measure_peak_bytes() -> Iterator[PeakMemory]:
    """Peak bytes allocated above the level at entry, via ``tracemalloc``."""
    rec = PeakMemory()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    rec.baseline_bytes = tracemalloc.get_traced_memory()[0]
    try:
        yield rec
    finally:
        _, peak = tracemalloc.get_traced_memory()
        rec.peak_bytes = max(0, peak - rec.baseline_bytes)
        if started:
            tracemalloc.stop()


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), backward, "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    k = a.shape[-1]
    if bd.ndim == 2:
        # Stack-of-rows times a weight matrix: one GEMM instead of a batched loop.
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError:
            raise ShapeError(f"matmul: incompatible batch dimensions {a.shape} @ {b.shape}") from None
    record_macs(out.size * k)

    def backward(g):
        ga = gb = None
        if bd.ndim == 2:
            g2 = g.reshape(-1, bd.shape[1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = a.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), backward, "layer_norm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), backward, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), backward, "tanh")


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; output shape ``indices.shape + (dim,)``."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[idx], (table,), backward, "embedding")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def slice_(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array keys."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: bad key for shape {a.shape}: {exc}") from None
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_key(key)

    def backward(g):
        ga = np.zeros(shape, dtype=dtype)
        if basic:
            ga[key] = g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (a,), backward, "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward, "transpose")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (rows x classes) against integer labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: label out of range for {logits.shape[1]} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# Backward pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss``.

    Returns a map from tensor to gradient array for every leaf that requires
    grad and contributes to the loss.  Tensors passed in ``params`` that the loss
    does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(topological_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                continue
            del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out: dict[Tensor, np.ndarray] = {leaf: grads[k] for k, leaf in leaves.items()}
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# Finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    worst_coordinate: dict[str, tuple[int, ...]]
    n_checked: int

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.overall < tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """``|a-b| / max(|a|, |b|, floor)``, defined as 0 where both sides are 0."""
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(num == 0, 0.0, num / np.where(den == 0, 1.0, den))
    return rel


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every coordinate of ``p``."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(
    model_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-3,
    floor: float = 0.0,
    groups: Mapping[str, Sequence[str]] | None = None,
) -> GradCheckReport:
    """Compare autodiff against central differences for every coordinate.

    ``params`` maps names to leaf tensors read by ``model_fn``.  Frozen tensors
    (``requires_grad=False``) are reported against their numeric gradient taken
    as zero, so a frozen group reports exactly 0.  ``groups`` optionally folds
    parameter names into named groups for the report.
    """
    loss = model_fn()
    trainable = [p for p in params.values() if p.requires_grad]
    analytic = backward(loss, trainable)
    per_param: dict[str, tuple[float, tuple[int, ...]]] = {}
    n = 0
    for name, p in params.items():
        if not p.requires_grad:
            per_param[name] = (0.0, ())
            continue
        a = analytic[p]
        num = numeric_grad(model_fn, p, h)
        rel = relative_error(a, num, floor)
        n += rel.size
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        per_param[name] = (float(rel.max()) if rel.size else 0.0, tuple(int(i) for i in idx))
    if groups is None:
        groups = {name: [name] for name in params}
    max_err, worst = {}, {}
    for gname, names in groups.items():
        best = max(((per_param[n_][0], n_) for n_ in names), default=(0.0, ""))
        max_err[gname] = best[0]
        worst[gname] = per_param[best[1]][1] if best[1] else ()
    return GradCheckReport(max_err, worst, n)
