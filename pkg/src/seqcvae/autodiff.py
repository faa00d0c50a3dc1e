"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation produces a :class:`Tensor` that remembers its parents and a
closure computing the adjoints of those parents.  Operations created while a
:class:`Tape` is active are also appended to that tape, which gives
:func:`backward` a ready-made topological order.

The kernel set is deliberately small: it covers exactly what LSTM-based
variational autoencoders need.
"""
from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParameterStore",
    "NonFiniteError",
    "ShapeError",
    "NondeterministicLossError",
    "backward",
    "grad_check",
    "no_grad",
    "is_grad_enabled",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "clamp",
    "tsum",
    "mean",
    "sq_l2",
    "softmax_xent",
    "gather",
    "gaussian_noise",
]


class ShapeError(ValueError):
    """Operands of a kernel have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A forward kernel produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite output in op '{op}'")
        self.op = op


class NondeterministicLossError(RuntimeError):
    """Two evaluations of a loss function at identical parameters disagreed."""


_node_ids = itertools.count()



class _ThreadState(threading.local):
    """Recording mode and open tapes, per thread, so samplers may run in a thread pool."""

    def __init__(self):
        self.grad_enabled = True
        self.tapes: List["Tape"] = []


_state = _ThreadState()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Evaluate operations without recording parents (inference mode)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False


def constant(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    out.name = None
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        if _state.tapes:
            _state.tapes[-1].record(out)
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# kernels


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        if a.data.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ, {ts[0].shape} vs {t.shape}")
    if axis not in (-1, ts[0].data.ndim - 1):
        raise ShapeError("concat: only the last axis is supported")
    sizes = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=-1)

    def bw(g):
        return [g[..., bounds[i] : bounds[i + 1]] for i in range(len(ts))]

    return _make(out, ts, bw, "concat")


def _slice(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "slice")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split branches keep exp() from overflowing
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _make(y, (a,), lambda g: (g / x,), "log")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the adjoint is zero where clipping was active."""
    a = _as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def tsum(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    s = tsum(a, axis)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def sq_l2(a, axis: int = -1) -> Tensor:
    """Squared Euclidean norm along ``axis``."""
    a = _as_tensor(a)
    x = a.data
    out = np.asarray((x * x).sum(axis=axis))
    return _make(out, (a,), lambda g: (2.0 * x * np.expand_dims(g, axis),), "sq_l2")


def softmax_xent(logits, targets, mask=None) -> Tensor:
    """Per-row cross entropy ``-log softmax(logits)[target]``, shape ``(B,)``.

    Rows with ``mask == 0`` contribute zero loss and zero gradient.
    """
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_xent: logits must be 2-D, got {z.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_xent: logits {z.shape} vs targets {t.shape}")
    m = np.ones(z.shape[0], dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (lse - shifted[rows, t]) * m

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g * m)[:, None],)

    return _make(loss, (logits,), bw, "softmax_xent")


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather: ids out of range for table of shape {table.shape}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), bw, "gather")


def gaussian_noise(shape, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Standard normal draw recorded as a constant (no adjoint)."""
    return Tensor(rng.standard_normal(shape).astype(dtype, copy=False))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[int, np.ndarray]:
    """Propagate adjoints from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive ``.grad`` (accumulated, so
    zero them between steps).  Returns ``{node_id: grad}`` for those leaves.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if tape is not None:
        order = tape.nodes
    else:
        order = _toposort(loss)
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                leaves[parent.node_id] = parent
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    out = {}
    for nid, leaf in leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[nid] = g
    return out


def _toposort(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.node_id not in seen and p.backward_fn is not None:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors with deterministic initialisation."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        # per-name stream: insertion order never affects initial values
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self._rng(name).uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def subset(self, prefix: str) -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self._params.items()
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self._params:
                raise KeyError(f"unknown parameter {n!r}")
            cur = self._params[n]
            if tuple(arr.shape) != cur.shape:
                raise ShapeError(f"parameter {n!r}: expected shape {cur.shape}, got {tuple(arr.shape)}")
            cur.data = np.array(arr, dtype=self.dtype)

    def freeze(self, prefix: str) -> None:
        for n in self.subset(prefix):
            self._params[n].requires_grad = False

    def unfreeze(self, prefix: str) -> None:
        for n in self.subset(prefix):
            self._params[n].requires_grad = True


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore,
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Compare analytic gradients with central finite differences.

    Returns the max relative error per parameter, where the relative error of
    one entry is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``max_entries`` limits the
    number of probed coordinates per parameter (chosen at random).
    """
    names = list(names) if names is not None else params.names()
    params.zero_grad()
    loss = loss_fn()
    again = loss_fn()
    if loss.data.tobytes() != again.data.tobytes():
        raise NondeterministicLossError("loss_fn returned different values on identical parameters")
    backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for name in names:
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    params.zero_grad()
    return report
