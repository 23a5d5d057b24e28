"""Reverse-mode automatic differentiation on dense numpy arrays.

Operations are recorded define-by-run onto a thread-local tape; ``backward``
replays the tape once in reverse and accumulates vector-Jacobian products.
Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a trailing-suffix match, and anything richer must go through the explicit
``expand`` primitive.  There is no silent type or shape promotion anywhere.
"""

from __future__ import annotations

import threading
import warnings
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "reset_tape",
    "active_tape",
    "new_tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "expand",
    "tsum",
    "tmean",
    "square",
    "exp",
    "gelu",
    "softmax",
    "layernorm",
    "take_rows",
    "finite_diff_check",
]


class _Node:
    """One recorded operation: output tensor, inputs, and its vjp closure."""

    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: "Tensor", inputs: tuple, vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of operations for one reverse pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = Tape()
        _STATE.grad_enabled = True
    return _STATE


def active_tape() -> Tape:
    """Return the tape operations are currently recorded onto."""
    return _state().tape


def reset_tape() -> None:
    """Drop all recorded operations on the active tape."""
    _state().tape.clear()


class new_tape:
    """Context manager that swaps in a fresh tape, restoring the old on exit."""

    def __enter__(self) -> Tape:
        st = _state()
        self._saved = st.tape
        st.tape = Tape()
        return st.tape

    def __exit__(self, *exc):
        _state().tape = self._saved
        return False


class no_grad:
    """Context manager that disables recording (inference mode)."""

    def __enter__(self):
        st = _state()
        self._saved = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._saved
        return False


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is held as float32 or float64; integer input is promoted to
    float64 so hand-written examples behave like ordinary math.  ``grad`` is
    populated (as a numpy array of the same shape/dtype) by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        """Copy of the underlying array (safe to mutate)."""
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / float(other))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def expand(self, shape) -> "Tensor":
        return expand(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def detach(self) -> "Tensor":
        """Same values, cut out of the current graph."""
        return Tensor(self.data, requires_grad=False)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.tape.nodes.append(_Node(out, inputs, vjp))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers: equal shapes, or one operand's shape is a trailing
# suffix of the other's.  Anything else is a DimensionError.
# ---------------------------------------------------------------------------

def _suffix_mode(sa: tuple, sb: tuple) -> int:
    """0: equal, 1: b is a suffix of a, 2: a is a suffix of b."""
    if sa == sb:
        return 0
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return 1
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return 2
    raise DimensionError(f"shapes {sa} and {sb} are not equal and neither is a trailing suffix of the other")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse the leading broadcast axes back onto `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _suffix_mode(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    return add(a, neg(_coerce(b, a if isinstance(a, Tensor) else None)))


def neg(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _suffix_mode(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D operands or equal-leading stacked batches."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(out, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose axes {axes} are not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(np.reshape(a.data, shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _record(out, (a,), lambda g: (np.reshape(g, a.shape),))


def expand(a, shape) -> Tensor:
    """Explicit broadcast of `a` to `shape` (prepend axes and/or stretch 1s)."""
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    try:
        view = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    stretched = tuple(i + lead for i, s in enumerate(a.shape) if s == 1 and shape[i + lead] != 1)
    out = Tensor(np.ascontiguousarray(view))

    def vjp(g):
        if stretched:
            g = g.sum(axis=stretched, keepdims=True)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        return (np.reshape(g, a.shape),)

    return _record(out, (a,), vjp)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _record(out, (a,), vjp)


def square(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = _coerce(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (y * g,))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _coerce(a)
    x = a.data
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * (x2 * x))
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def vjp(g):
        du = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
        return (g * (0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * du)),)

    return _record(out, (a,), vjp)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _coerce(a)
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


def layernorm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match feature width ({n},)")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        gg = g * gamma.data
        dx = inv * (gg - np.mean(gg, axis=-1, keepdims=True)
                    - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record(out, (a, gamma, beta), vjp)


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer index array (not differentiable in ids)."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"take_rows indices must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"take_rows index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def vjp(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        return (acc,)

    return _record(out, (table,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every leaf on the tape.

    A leaf is a tensor that no recorded op produced (parameters, inputs);
    gradients for intermediates flow through but are not stored.  ``loss``
    must be a scalar produced on the tape; if it is disconnected a
    RuntimeWarning is emitted and every leaf gradient is zero.  Gradients
    add into existing ``.grad`` buffers, so callers clear them between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced_ids = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced_ids:
        warnings.warn("loss is not connected to the active tape; all gradients are zero",
                      RuntimeWarning, stacklevel=2)

    for node in reversed(tape.nodes):
        g_out = flowing.get(id(node.output))
        if g_out is None:
            continue
        partials = node.vjp(g_out)
        for inp, part in zip(node.inputs, partials):
            if part is None or not inp.requires_grad:
                continue
            prev = flowing.get(id(inp))
            flowing[id(inp)] = part if prev is None else prev + part

    # write results once per leaf (zeros for recorded-but-unreached ones)
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced_ids and id(t) not in leaves:
                leaves[id(t)] = t
    for t in leaves.values():
        g = flowing.get(id(t))
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype)
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.ones_like(loss.data)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be deterministic (two forward passes are compared bit-for-bit)
    and is reduced to a scalar with fixed weights when it returns a vector.
    Returns ``max_i |analytic_i - numeric_i| / (|numeric_i| + eps)``.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    base = np.asarray(x.data, dtype=np.float64)

    def reduced(arr: np.ndarray) -> Tensor:
        leaf = Tensor(arr, requires_grad=True, dtype=np.float64)
        out = f(leaf)
        if not isinstance(out, Tensor):
            raise ContractError("finite_diff_check: f must return a Tensor")
        if out.data.size != 1:
            w = np.linspace(1.0, 2.0, out.data.size).reshape(out.shape)
            out = tsum(mul(out, Tensor(w, dtype=np.float64)))
        return leaf, out

    with new_tape():
        _, y1 = reduced(base)
    with new_tape():
        _, y2 = reduced(base)
    if not np.array_equal(y1.data, y2.data):
        raise ContractError("finite_diff_check: f is not deterministic across repeated calls")

    with new_tape() as tape:
        leaf, y = reduced(base)
        backward(y, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = np.array(flat, copy=True)
        bump[i] = flat[i] + eps
        with new_tape():
            _, hi = reduced(bump.reshape(base.shape))
        bump[i] = flat[i] - eps
        with new_tape():
            _, lo = reduced(bump.reshape(base.shape))
        num_flat[i] = (hi.item() - lo.item()) / (2.0 * eps)

    err = np.abs(analytic - numeric) / (np.abs(numeric) + eps)
    return float(err.max()) if err.size else 0.0
