"""Minimal deterministic tensor engine with reverse- and forward-mode derivatives.

Tensors wrap float64 numpy arrays. Operations executed while gradient
tracking is enabled record a define-by-run tape (each output keeps its
parents plus a vjp closure); ``backward`` replays that tape in reverse
creation order. The vjp closures are themselves written in terms of tensor
operations, so calling ``backward(..., create_graph=True)`` yields gradient
tensors that are differentiable again (needed for second-order MAML).

Broadcasting is deliberately restricted to the patterns the models need:
equal shapes, scalars, and a trailing vector against the last axis (bias
addition and per-channel affine terms). Anything richer must go through the
explicit ``expand`` primitive.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_SEQ = itertools.count()
# recording state is per-thread: episode-level parallelism must not let one
# thread's no_grad block disable recording in another
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def _set_grad(value: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = value
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    return _set_grad(False)


def enable_grad():
    return _set_grad(True)


class Tensor:
    """A float64 array plus an optional tape node.

    Leaf tensors are created directly; interior tensors are created by the
    operations below and carry ``_parents``/``_vjp``/``_jvp``.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_jvp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._jvp: Callable | None = None
        self._seq = next(_SEQ)

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, jvp: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._jvp = jvp
    return out


# -- broadcasting (equal | scalar | trailing vector only) ----------------

def _binary_mode(a: Tensor, b: Tensor, opname: str) -> str:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return "equal"
    if a.ndim == 0 or b.ndim == 0:
        return "scalar"
    if b.ndim == 1 and sa[-1:] == sb:
        return "b_vec"
    if a.ndim == 1 and sb[-1:] == sa:
        return "a_vec"
    raise DimensionError(f"{opname}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of the restricted broadcast: reduce ``g`` back to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return reshape(reduce_sum(g), ())
    # trailing vector: sum over all leading axes
    lead = tuple(range(g.ndim - 1))
    return reshape(reduce_sum(g, axis=lead), shape)


# -- arithmetic primitives ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "add")
    out_data = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    def jvp(ta, tb):
        return ta + tb

    return _node(out_data, (a, b), vjp, jvp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "sub")
    out_data = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)

    def jvp(ta, tb):
        return ta - tb

    return _node(out_data, (a, b), vjp, jvp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "mul")
    out_data = a.data * b.data

    def vjp(g):
        return _reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)

    def jvp(ta, tb):
        return ta * b.data + a.data * tb

    return _node(out_data, (a, b), vjp, jvp)


def div(a, b) -> Tensor:
    return mul(as_tensor(a), power(as_tensor(b), -1.0))


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (neg(g),)

    def jvp(t):
        return -t

    return _node(-a.data, (a,), vjp, jvp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    def jvp(ta, tb):
        return ta @ b.data + a.data @ tb

    return _node(out_data, (a, b), vjp, jvp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expects a 2-D tensor, got {a.shape}")

    def vjp(g):
        return (transpose(g),)

    def jvp(t):
        return t.T.copy()

    return _node(a.data.T.copy(), (a,), vjp, jvp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out_data = a.data.reshape(shape)

    def vjp(g):
        return (reshape(g, old),)

    def jvp(t):
        return t.reshape(shape)

    return _node(out_data, (a,), vjp, jvp)


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules); adjoint sums the new axes."""
    a = as_tensor(a)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {tuple(shape)}") from exc
    old = a.shape
    ndiff = len(shape) - a.ndim
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, d in enumerate(old) if d == 1 and shape[i + ndiff] != 1
    )

    def vjp(g):
        return (reshape(reduce_sum(g, axis=axes, keepdims=False), old) if axes else g,)

    def jvp(t):
        return np.broadcast_to(t, shape).copy()

    return _node(out_data, (a,), vjp, jvp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def vjp(g):
        return (mul(g, mul(Tensor(p), power(a, p - 1.0))),)

    def jvp(t):
        return p * a.data ** (p - 1.0) * t

    return _node(out_data, (a,), vjp, jvp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    out = _node(out_data, (a,), None, None)
    if out._parents:

        def vjp(g):
            return (mul(g, out),)

        def jvp(t):
            return out_data * t

        out._vjp, out._jvp = vjp, jvp
    return out


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, power(a, -1.0)),)

    def jvp(t):
        return t / a.data

    return _node(np.log(a.data), (a,), vjp, jvp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    out = _node(out_data, (a,), None, None)
    if out._parents:

        def vjp(g):
            return (mul(g, sub(Tensor(1.0), mul(out, out))),)

        def jvp(t):
            return (1.0 - out_data * out_data) * t

        out._vjp, out._jvp = vjp, jvp
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def vjp(g):
        # d softplus / dx = sigmoid(x), composed from primitives
        sig = power(add(Tensor(1.0), exp(neg(a))), -1.0)
        return (mul(g, sig),)

    def jvp(t):
        return t / (1.0 + np.exp(-a.data))

    return _node(out_data, (a,), vjp, jvp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0.0).astype(np.float64)  # subgradient at 0 is 0

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    def jvp(t):
        return mask * t

    return _node(a.data * mask, (a,), vjp, jvp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)
    old = a.shape
    if axis is None:
        red_axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        red_axes = (axis % a.ndim,)
    else:
        red_axes = tuple(ax % a.ndim for ax in axis)
    kd_shape = tuple(1 if i in red_axes else d for i, d in enumerate(old))

    def vjp(g):
        return (expand(reshape(g, kd_shape), old),)

    def jvp(t):
        return np.sum(t, axis=axis, keepdims=keepdims)

    return _node(out_data, (a,), vjp, jvp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = 1
        for ax in axis:
            count *= a.shape[ax % a.ndim]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out_data.ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(tensors)):
            key = tuple(
                slice(offsets[i], offsets[i + 1]) if d == ax else slice(None)
                for d in range(out_data.ndim)
            )
            grads.append(getitem(g, key))
        return tuple(grads)

    def jvp(*tans):
        return np.concatenate(list(tans), axis=axis)

    return _node(out_data, tensors, vjp, jvp)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = np.array(a.data[key])

    def vjp(g):
        return (scatter(g, key, a.shape),)

    def jvp(t):
        return np.array(t[key])

    return _node(out_data, (a,), vjp, jvp)


def scatter(g, key, shape) -> Tensor:
    """Place ``g`` into a zero tensor of ``shape`` at ``key`` (adjoint of getitem)."""
    g = as_tensor(g)
    out_data = np.zeros(shape)
    out_data[key] = g.data

    def vjp(g2):
        return (getitem(g2, key),)

    def jvp(t):
        out = np.zeros(shape)
        out[key] = t
        return out

    return _node(out_data, (g,), vjp, jvp)


# -- autodiff drivers -----------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    return out


def backward(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for each tensor in ``wrt``.

    Leaves not reachable from ``loss`` get zero gradients. With
    ``create_graph=True`` the returned gradients stay on the tape and can be
    differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = _reachable(loss)
    adjoint: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for t in sorted(nodes, key=lambda n: n._seq, reverse=True):
            g = adjoint.get(id(t))
            if g is None or t._vjp is None:
                continue
            grads = t._vjp(g)
            for p, gp in zip(t._parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                acc = adjoint.get(id(p))
                adjoint[id(p)] = gp if acc is None else add(acc, gp)
    return [adjoint.get(id(p)) or Tensor(np.zeros(p.shape)) for p in wrt]


def jvp(f: Callable[[Tensor], Tensor], x, v) -> Tensor:
    """Forward-mode directional derivative (df/dx)·v at x.

    ``f`` is traced once; tangents are pushed through the recorded tape in
    creation order using each op's jvp rule.
    """
    x = as_tensor(x)
    v = as_tensor(v)
    if v.shape != x.shape:
        raise DimensionError(f"jvp: direction shape {v.shape} != input shape {x.shape}")
    seed = Tensor(x.data, requires_grad=True)
    with enable_grad():
        y = f(seed)
    tangents: dict[int, np.ndarray] = {id(seed): v.data}
    for t in sorted(_reachable(y), key=lambda n: n._seq):
        if t._jvp is None:
            continue
        parent_tans = [tangents.get(id(p)) for p in t._parents]
        if all(pt is None for pt in parent_tans):
            continue
        parent_tans = [
            np.zeros(p.shape) if pt is None else pt for p, pt in zip(t._parents, parent_tans)
        ]
        tangents[id(t)] = t._jvp(*parent_tans)
    return Tensor(tangents.get(id(y), np.zeros(y.shape)))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per coordinate: |analytic - numeric| / max(1, |analytic|,
    |numeric|). NaNs propagate into the returned value.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    params = list(params)
    loss = f()
    grads = backward(loss, wrt=params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            lp = f().item()
            flat[i] = saved - eps
            lm = f().item()
            flat[i] = saved
            numeric = (lp - lm) / (2.0 * eps)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = float(np.maximum(worst, rel))  # NaN-propagating max
    return worst
