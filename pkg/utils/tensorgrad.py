"""
Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations are looked up in a table of forward/vector-Jacobian-product rules
and appended to the active Tape in call order, so the tape's order is a
topological order. `checkpoint` wraps a pure function so that only its inputs
are kept and its interior is recomputed during the backward sweep.

With no active tape every operation just computes its forward value, which
lets the samplers run the same code on and off the tape.
"""
from __future__ import annotations
import contextvars
import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from utils.errors import CheckpointIntegrityError, TapeUsageError, TensorDomainError, TensorShapeError

logger = logging.getLogger(__name__)

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE: contextvars.ContextVar[Optional['Tape']] = contextvars.ContextVar('tensorgrad_tape', default=None)


def freeze(arr: Any) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable float64 array, optionally bound to a node of a Tape."""

    __slots__ = ('data', 'node', 'tape')
    __array_priority__ = 1000

    def __init__(self, data: Any, node: Optional[int] = None, tape: Optional['Tape'] = None):
        self.data = freeze(data)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def tracked_by(self, tape: Optional['Tape']) -> bool:
        return tape is not None and self.tape is tape and self.node is not None

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ''
        return f"Tensor(shape={self.shape}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x: TensorLike) -> Tensor:
    """Detached copy of `x`: never receives gradients."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


# memory accounting

@dataclass
class MemoryAccountant:
    """Bytes saved for the backward pass. The `interior_*` counters only cover
    nodes recorded inside score-network calls."""
    live_bytes: int = 0
    peak_bytes: int = 0
    interior_live_bytes: int = 0
    interior_peak_bytes: int = 0

    def retain(self, nbytes: int, interior: bool) -> None:
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        if interior:
            self.interior_live_bytes += nbytes
            self.interior_peak_bytes = max(self.interior_peak_bytes, self.interior_live_bytes)

    def release(self, nbytes: int, interior: bool) -> None:
        self.live_bytes -= nbytes
        if interior:
            self.interior_live_bytes -= nbytes


@dataclass
class Node:
    id: int
    op: str
    inputs: Tuple[Optional[int], ...]
    vjp: Optional[VJP]
    nbytes: int = 0
    interior: bool = False
    name: Optional[str] = None
    shape: Tuple[int, ...] = ()
    released: bool = False


class GradientMap(dict):
    """leaf node id -> Tensor holding d(loss)/d(leaf)."""

    def __init__(self, grads: Dict[int, Tensor], names: Dict[int, Optional[str]]):
        super().__init__(grads)
        self.names = names

    def of(self, leaf: Tensor) -> np.ndarray:
        return self[leaf.node].data

    def by_name(self) -> Dict[str, np.ndarray]:
        return {self.names[k]: v.data for k, v in self.items() if self.names.get(k)}


class Tape:
    """Append-only record of operations for one backward sweep.

    Single writer: build it, call `backward` once, drop it.
    """

    def __init__(self, accountant: Optional[MemoryAccountant] = None, *, interior: bool = False):
        self.nodes: List[Node] = []
        self.accountant = accountant or MemoryAccountant()
        self._interior_depth = 1 if interior else 0
        self._tokens: List[contextvars.Token] = []
        self._consumed = False

    def __enter__(self) -> 'Tape':
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    @contextmanager
    def interior(self) -> Iterator[None]:
        self._interior_depth += 1
        try:
            yield
        finally:
            self._interior_depth -= 1

    @property
    def leaves(self) -> Dict[int, Optional[str]]:
        return {n.id: n.name for n in self.nodes if n.op == 'leaf'}

    def variable(self, value: TensorLike, name: Optional[str] = None) -> Tensor:
        """Register a leaf whose gradient `backward` reports."""
        self._check_open()
        t = Tensor(value.data if isinstance(value, Tensor) else value)
        node = Node(id=len(self.nodes), op='leaf', inputs=(), vjp=None, name=name, shape=t.shape)
        self.nodes.append(node)
        t.node, t.tape = node.id, self
        return t

    def append(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VJP,
               saved: Sequence[np.ndarray] = ()) -> Tensor:
        self._check_open()
        ids = tuple(x.node if x.tracked_by(self) else None for x in inputs)
        nbytes = int(sum(np.asarray(s).nbytes for s in saved))
        interior = self._interior_depth > 0
        node = Node(id=len(self.nodes), op=op, inputs=ids, vjp=vjp, nbytes=nbytes,
                    interior=interior, shape=np.shape(out))
        self.nodes.append(node)
        self.accountant.retain(nbytes, interior)
        return Tensor(out, node=node.id, tape=self)

    def backward(self, loss: Tensor) -> GradientMap:
        """Reverse sweep from a scalar loss. Consumes the tape."""
        if loss.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.tracked_by(self):
            raise TapeUsageError("loss was not recorded on this tape")
        grads = self.backprop(loss, np.ones(loss.shape))
        out = {}
        for node in self.nodes:
            if node.op == 'leaf':
                g = grads.get(node.id)
                out[node.id] = Tensor(g if g is not None else np.zeros(node.shape))
        return GradientMap(out, self.leaves)

    def backprop(self, root: Tensor, seed: np.ndarray) -> Dict[int, np.ndarray]:
        """Vector-Jacobian product of `root` with `seed`; returns leaf grads."""
        self._check_open()
        self._consumed = True
        grads: Dict[int, np.ndarray] = {root.node: np.asarray(seed, dtype=np.float64)}
        leaf_grads: Dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: root.node + 1]):
            g = grads.pop(node.id, None)
            if node.op == 'leaf':
                if g is not None:
                    leaf_grads[node.id] = g
                continue
            if g is not None:
                for nid, ig in zip(node.inputs, node.vjp(g)):
                    if nid is None or ig is None:
                        continue
                    grads[nid] = grads[nid] + ig if nid in grads else ig
            self._release(node)
        for node in self.nodes:
            self._release(node)
        return leaf_grads

    def _release(self, node: Node) -> None:
        if not node.released:
            self.accountant.release(node.nbytes, node.interior)
            node.released = True
            node.vjp = None

    def _check_open(self) -> None:
        if self._consumed:
            raise TapeUsageError("tape has already been consumed by a backward pass")


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


@contextmanager
def no_grad() -> Iterator[None]:
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


# op table: kind -> rule(*arrays, **params) -> (out, vjp, saved arrays)

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorShapeError(op, a.shape, b.shape) from None


def _add(a, b):
    _broadcast_check('add', a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), ()


def _sub(a, b):
    _broadcast_check('sub', a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), ()


def _mul(a, b):
    _broadcast_check('mul', a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), (a, b)


def _div(a, b):
    _broadcast_check('div', a, b)
    if np.any(b == 0):
        raise TensorDomainError(f"div: zero entry in divisor of shape {b.shape}")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)), (b, out)


def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,), ()


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorShapeError('matmul', a.shape, b.shape, detail='expects (n,k) @ (k,m)')
    return a @ b, lambda g: (g @ b.T, a.T @ g), (a, b)


def _transpose(a):
    if a.ndim != 2:
        raise TensorShapeError('transpose', a.shape, detail='expects a matrix')
    return a.T, lambda g: (g.T,), ()


def _sigmoid(a):
    out = special.expit(a)
    return out, lambda g: (g * out * (1.0 - out),), (out,)


def _softplus(a):
    return np.logaddexp(0.0, a), lambda g: (g * special.expit(a),), (a,)


def _silu(a):
    s = special.expit(a)
    return a * s, lambda g: (g * (s + a * s * (1.0 - s)),), (a, s)


def _sin(a):
    return np.sin(a), lambda g: (g * np.cos(a),), (a,)


def _cos(a):
    return np.cos(a), lambda g: (-g * np.sin(a),), (a,)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,), (out,)


def _log(a):
    if np.any(a <= 0):
        raise TensorDomainError(f"log: non-positive entry (min {a.min()!r})")
    return np.log(a), lambda g: (g / a,), (a,)


def _square(a):
    return a * a, lambda g: (2.0 * g * a,), (a,)


def _sqrt(a):
    if np.any(a < 0):
        raise TensorDomainError(f"sqrt: negative entry (min {a.min()!r})")
    out = np.sqrt(a)

    def vjp(g):
        # derivative is unbounded at 0; report 0 there so results stay finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)
    return out, vjp, (out,)


def _softmax(a, axis: int = -1):
    out = special.softmax(a, axis=axis)
    return out, lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),), (out,)


def _cumsum(a, axis: int = -1, simplex: bool = False):
    out = np.cumsum(a, axis=axis)
    if simplex:
        # input is a probability vector: pin the total to exactly one
        idx = [slice(None)] * out.ndim
        idx[axis] = -1
        out[tuple(idx)] = 1.0

    def vjp(g):
        if simplex:
            g = g.copy()
            g[tuple(idx)] = 0.0
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
    return out, vjp, ()


def _concat(*arrays, axis: int = 0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise TensorShapeError('concat', *(x.shape for x in arrays), detail=f'axis={axis}') from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis)), ()


def _slice(a, index=()):
    try:
        out = a[index]
    except IndexError as e:
        raise TensorShapeError('slice', a.shape, detail=str(e)) from None

    def vjp(g):
        full = np.zeros(a.shape)
        # repeated indices accumulate
        np.add.at(full, index, g)
        return (full,)
    return np.array(out, dtype=np.float64), vjp, ()


def _reshape(a, shape=()):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise TensorShapeError('reshape', a.shape, shape) from None
    return out, lambda g: (g.reshape(a.shape),), ()


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum(a, axis=None, keepdims: bool = False):
    return np.sum(a, axis=axis, keepdims=keepdims), lambda g: (_expand(g, a.shape, axis, keepdims),), ()


def _mean(a, axis=None, keepdims: bool = False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return (np.mean(a, axis=axis, keepdims=keepdims),
            lambda g: (_expand(g, a.shape, axis, keepdims) / count,), ())


def _interp(a, fn=None):
    """Differentiable evaluation of a scipy piecewise polynomial."""
    deriv = fn.derivative()
    return np.asarray(fn(a), dtype=np.float64), lambda g: (g * deriv(a),), (a,)


def _reparam(mean_, std, noise):
    _broadcast_check('gaussian_reparam', mean_, noise)
    _broadcast_check('gaussian_reparam', std, noise)
    if np.any(std < 0):
        raise TensorDomainError(f"gaussian_reparam: negative std (min {std.min()!r})")
    out = mean_ + std * noise
    if out.shape != np.broadcast_shapes(mean_.shape, noise.shape):
        raise TensorShapeError('gaussian_reparam', mean_.shape, std.shape, noise.shape)
    return out, lambda g: (_unbroadcast(g, mean_.shape), _unbroadcast(g * noise, std.shape), None), (noise,)


OPS: Dict[str, Callable[..., Tuple[np.ndarray, VJP, Sequence[np.ndarray]]]] = {
    'add': _add,
    'sub': _sub,
    'mul': _mul,
    'div': _div,
    'scale': _scale,
    'matmul': _matmul,
    'transpose': _transpose,
    'sigmoid': _sigmoid,
    'softplus': _softplus,
    'silu': _silu,
    'sin': _sin,
    'cos': _cos,
    'exp': _exp,
    'log': _log,
    'square': _square,
    'sqrt': _sqrt,
    'softmax': _softmax,
    'cumsum': _cumsum,
    'concat': _concat,
    'slice': _slice,
    'reshape': _reshape,
    'sum': _sum,
    'mean': _mean,
    'interp': _interp,
    'reparam': _reparam,
}


def record(op_kind: str, inputs: Sequence[TensorLike], **params) -> Tensor:
    """Compute `op_kind` and append it to the active tape when any input is tracked."""
    rule = OPS.get(op_kind)
    if rule is None:
        raise TapeUsageError(f"unknown op kind '{op_kind}'")
    tensors = [as_tensor(x) for x in inputs]
    out, vjp, saved = rule(*(t.data for t in tensors), **params)
    tape = _ACTIVE.get()
    if tape is None or not any(t.tracked_by(tape) for t in tensors):
        return Tensor(out)
    return tape.append(op_kind, tensors, out, vjp, saved)


def add(a, b): return record('add', [a, b])
def sub(a, b): return record('sub', [a, b])
def mul(a, b): return record('mul', [a, b])
def div(a, b): return record('div', [a, b])
def scale(a, factor: float): return record('scale', [a], factor=float(factor))
def matmul(a, b): return record('matmul', [a, b])
def transpose(a): return record('transpose', [a])
def sigmoid(a): return record('sigmoid', [a])
def softplus(a): return record('softplus', [a])
def silu(a): return record('silu', [a])
def sin(a): return record('sin', [a])
def cos(a): return record('cos', [a])
def exp(a): return record('exp', [a])
def log(a): return record('log', [a])
def square(a): return record('square', [a])
def sqrt(a): return record('sqrt', [a])
def softmax(a, axis: int = -1): return record('softmax', [a], axis=axis)
def cumsum(a, axis: int = -1): return record('cumsum', [a], axis=axis)
def concat(tensors: Sequence[TensorLike], axis: int = 0): return record('concat', list(tensors), axis=axis)
def slice_(a, index): return record('slice', [a], index=index)
def reshape(a, shape): return record('reshape', [a], shape=tuple(shape))
def sum_(a, axis=None, keepdims: bool = False): return record('sum', [a], axis=axis, keepdims=keepdims)
def mean(a, axis=None, keepdims: bool = False): return record('mean', [a], axis=axis, keepdims=keepdims)
def interp(a, fn): return record('interp', [a], fn=fn)


def simplex_cumsum(logits: TensorLike) -> Tensor:
    """cumsum(softmax(logits)) with the last entry pinned to exactly 1."""
    return record('cumsum', [softmax(logits)], axis=-1, simplex=True)


def stack_scalars(values: Sequence[TensorLike]) -> Tensor:
    return concat([reshape(v, (1,)) for v in values], axis=0)


def gaussian_reparam(mean_: TensorLike, std: TensorLike, noise: TensorLike) -> Tensor:
    """mean + std * noise; gradients reach mean and std, never noise."""
    return record('reparam', [mean_, std, constant(noise)])


# rematerialization

def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def checkpoint(recipe: Callable[..., Tensor], inputs: Sequence[TensorLike], *, enabled: bool = True) -> Tensor:
    """Run `recipe(*inputs)` without keeping its interior activations.

    The recipe must be a pure function of `inputs`. During the backward sweep
    it is replayed on a private tape sharing this tape's accountant, and the
    replayed output must hash to the recorded one. With `enabled=False` the
    recipe is recorded inline (the interior is then retained until backward).
    """
    tape = _ACTIVE.get()
    tensors = [as_tensor(x) for x in inputs]
    if tape is None:
        return recipe(*tensors)
    if not enabled:
        with tape.interior():
            return recipe(*tensors)
    tracked = [t.tracked_by(tape) for t in tensors]
    with no_grad():
        out = recipe(*[constant(t) for t in tensors])
    if not any(tracked):
        return Tensor(out.data)
    digest = _digest(out.data)
    datas = [t.data for t in tensors]
    accountant = tape.accountant

    def vjp(g):
        sub_tape = Tape(accountant, interior=True)
        with sub_tape:
            xs = [sub_tape.variable(d) if tr else Tensor(d) for d, tr in zip(datas, tracked)]
            replay = recipe(*xs)
        if _digest(replay.data) != digest:
            raise CheckpointIntegrityError(
                "checkpointed recipe is not deterministic: replayed output differs from the recorded forward value"
            )
        if not replay.tracked_by(sub_tape):
            return tuple(np.zeros_like(d) if tr else None for d, tr in zip(datas, tracked))
        leaf_grads = sub_tape.backprop(replay, g)
        return tuple(
            leaf_grads.get(x.node, np.zeros_like(d)) if tr else None
            for x, d, tr in zip(xs, datas, tracked)
        )

    return tape.append('checkpoint', tensors, out.data, vjp, saved=[d for d, tr in zip(datas, tracked) if tr])


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x.copy())
        flat[i] = orig - h
        lo = fn(x.copy())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
