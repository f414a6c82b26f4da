"""Dense float64 tensors, an explicit reverse-mode gradient tape, and a
central-difference gradient checker.

A :class:`GradTape` records every operation whose inputs include a tensor
returned by :meth:`GradTape.watch`. Operations on untracked tensors are plain
numpy computations and leave no trace. Tapes are meant to live for a single
training step; nothing is retained between calls to :func:`backward`.

Operations with a non-smooth point (``relu``, ``max``) append their active
pattern to a kink log when one is open (see :func:`record_kinks`), which lets
:func:`grad_check` detect probes that straddle a kink.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError, ParameterError

_ids = itertools.count(1)
_kink_log: contextvars.ContextVar = contextvars.ContextVar("kink_log", default=None)


class Tensor:
    """Immutable dense array of doubles, optionally tracked on a tape."""

    __slots__ = ("data", "tape_id", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, tape=None, tape_id=None):
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = arr
        t.tape_id = tape_id
        t._tape = tape
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        return self.tape_id is not None

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return np.array(self.data)

    def __repr__(self):
        tag = f", tape_id={self.tape_id}" if self.tracked else ""
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class GradTape:
    """Append-only record of differentiable operations for one step."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.gradients = {}

    def watch(self, x) -> Tensor:
        """Return a tracked leaf sharing ``x``'s values."""
        src = x.data if isinstance(x, Tensor) else np.array(x, dtype=np.float64)
        tid = next(_ids)
        self.leaves[tid] = src.shape
        return Tensor._wrap(src, self, tid)

    def _record(self, out, parents):
        tid = next(_ids)
        self.nodes.append((tid, tuple(parents)))
        return Tensor._wrap(out, self, tid)

    def backward(self, loss: Tensor) -> dict:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {loss.tape_id: np.ones(loss.shape)}
        for tid, parents in reversed(self.nodes):
            g = grads.pop(tid, None)
            if g is None:
                continue
            for pid, vjp in parents:
                contrib = vjp(g)
                prev = grads.get(pid)
                grads[pid] = contrib if prev is None else prev + contrib
        self.gradients = {
            lid: Tensor._wrap(grads[lid] if lid in grads else np.zeros(shape))
            for lid, shape in self.leaves.items()
        }
        return self.gradients


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` for every leaf watched on its tape.

    Leaves that do not influence ``loss`` receive zero gradients. A loss with
    no tracked ancestry yields an empty map.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return {}
    return loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(out, *parents):
    """Wrap ``out``; ``parents`` are (tensor, vjp) pairs."""
    tape = None
    for t, _ in parents:
        if t._tape is not None:
            if tape is not None and t._tape is not tape:
                raise ContractError("operands are tracked on different tapes")
            tape = t._tape
    if tape is None:
        return Tensor._wrap(out)
    return tape._record(out, [(t.tape_id, vjp) for t, vjp in parents if t._tape is not None])


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _note_kink(pattern):
    log = _kink_log.get()
    if log is not None:
        log.append(pattern)


@contextlib.contextmanager
def record_kinks():
    """Collect the active pattern of every non-smooth op evaluated inside."""
    log = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a, lambda g: -g))


def matmul(a, b) -> Tensor:
    """Rank-2 matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    )


def _contract(expr: str, *arrays):
    """np.einsum, with two-operand contractions routed through batched matmul."""
    if len(arrays) != 2:
        return np.einsum(expr, *arrays, optimize=len(arrays) > 2)
    lhs, out = expr.split("->")
    sa, sb = lhs.split(",")
    a, b = arrays
    # indices private to one operand and absent from the output are summed first
    lone_a = [c for c in sa if c not in sb and c not in out]
    if lone_a:
        a = a.sum(axis=tuple(sa.index(c) for c in lone_a))
        sa = "".join(c for c in sa if c not in lone_a)
    lone_b = [c for c in sb if c not in sa and c not in out]
    if lone_b:
        b = b.sum(axis=tuple(sb.index(c) for c in lone_b))
        sb = "".join(c for c in sb if c not in lone_b)
    batch = [c for c in out if c in sa and c in sb]
    free_a = [c for c in out if c in sa and c not in sb]
    free_b = [c for c in out if c in sb and c not in sa]
    summed = [c for c in sa if c in sb and c not in out]
    size = dict(zip(sa, a.shape)) | dict(zip(sb, b.shape))

    def n(idx):
        return int(np.prod([size[c] for c in idx], dtype=np.int64))

    a2 = a.transpose([sa.index(c) for c in batch + free_a + summed]).reshape(
        n(batch), n(free_a), n(summed))
    b2 = b.transpose([sb.index(c) for c in batch + summed + free_b]).reshape(
        n(batch), n(summed), n(free_b))
    res = np.matmul(a2, b2).reshape([size[c] for c in batch + free_a + free_b])
    order = batch + free_a + free_b
    return res.transpose([order.index(c) for c in out])


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) differentiable in every operand.

    Every index of an operand must also appear in the output or in another
    operand, and no operand may repeat an index.
    """
    ops = [_as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ContractError("einsum needs an explicit output ('...->...')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ContractError(f"einsum got {len(ops)} operands for '{subscripts}'")
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim:
            raise DimensionError(f"einsum term '{s}' does not match shape {o.shape}")
        if len(set(s)) != len(s):
            raise ContractError(f"einsum term '{s}' repeats an index")
    out = _contract(subscripts.replace(" ", ""), *[o.data for o in ops])

    def vjp_for(i):
        others = [s for j, s in enumerate(in_subs) if j != i]
        covered = set(out_sub).union(*others) if others else set(out_sub)
        if not set(in_subs[i]) <= covered:
            raise ContractError(f"einsum index in '{in_subs[i]}' is summed away alone")
        expr = ",".join([out_sub] + others) + "->" + in_subs[i]

        def vjp(g):
            rest = [o.data for j, o in enumerate(ops) if j != i]
            return _contract(expr, g, *rest)

        return vjp

    return _make(out, *[(o, vjp_for(i)) for i, o in enumerate(ops)])


# ---------------------------------------------------------------- pointwise

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a, lambda g: g * out))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a, lambda g: g / a.data))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a, lambda g: g * 0.5 / out))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    active = a.data > 0
    _note_kink(active)
    return _make(np.where(active, a.data, 0.0), (a, lambda g: g * active))


# ---------------------------------------------------------------- reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    return _make(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a, lambda g: _expand(g, a.shape, axis, keepdims)),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return _make(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a, lambda g: _expand(g, a.shape, axis, keepdims) / n),
    )


def tmax(a, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    _note_kink(idx)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return full

    return _make(out, (a, vjp))


def softmax(a, axis=-1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))))


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, (a, lambda g: g - p * g.sum(axis=axis, keepdims=True)))


def softmax_rows(m, temperature: float) -> Tensor:
    """Row-wise softmax of ``m / temperature`` for a rank-2 tensor."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    m = _as_tensor(m)
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(mul(m, 1.0 / temperature), axis=1)


def l2_normalize(a, axis=-1, floor=1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit length (norms below ``floor`` are clamped)."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, floor)
    out = a.data / safe
    clamped = norm < floor

    def vjp(g):
        proj = g - out * (g * out).sum(axis=axis, keepdims=True)
        return np.where(clamped, g, proj) / safe

    return _make(out, (a, vjp))


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a, lambda g: g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a, lambda g: np.transpose(g, inv)))


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return full

    return _make(a.data[index], (a, vjp))


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp_for(i):
        sl = [slice(None)] * ts[i].ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return _make(np.concatenate([t.data for t in ts], axis=axis),
                 *[(t, vjp_for(i)) for i, t in enumerate(ts)])


def stack(tensors: Sequence, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]

    def vjp_for(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(np.stack([t.data for t in ts], axis=axis),
                 *[(t, vjp_for(i)) for i, t in enumerate(ts)])


def detach(a) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor._wrap(_as_tensor(a).data)


# ---------------------------------------------------------------- checking

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self):
        return self.max_rel_error


def _evaluate(f, arrays):
    with record_kinks() as kinks:
        out = _as_tensor(f([Tensor._wrap(a) for a in arrays]))
    if out.size != 1:
        raise ContractError(f"checked function must return a scalar, got shape {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"checked function returned non-finite value {value}")
    return value, kinks


def _same_pattern(p, q):
    return len(p) == len(q) and all(np.array_equal(x, y) for x, y in zip(p, q))


def check_gradients(
    f: Callable[[list], Tensor],
    params: Sequence,
    eps: float = 1e-5,
    probes: int = 100,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``probes`` coordinates are drawn uniformly (without replacement) over all
    entries of ``params``. A probe whose kink pattern changes anywhere within
    ``10 * eps`` of the current point is skipped as non-smooth.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = [np.array(_as_tensor(p).data, dtype=np.float64) for p in params]

    tape = GradTape()
    watched = [tape.watch(b) for b in base]
    loss = _as_tensor(f(watched))
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError(f"checked function returned non-finite value {loss.data}")
    grads = backward(loss)
    analytic = [grads[w.tape_id].data if w.tape_id in grads else np.zeros(w.shape)
                for w in watched]

    _, centre = _evaluate(f, base)
    sizes = [b.size for b in base]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(probes, total), replace=False)

    worst, checked, skipped = 0.0, 0, 0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        pos = np.unravel_index(int(flat - offsets[which]), base[which].shape)

        def at(delta):
            shifted = list(base)
            arr = base[which].copy()
            arr[pos] += delta
            shifted[which] = arr
            return _evaluate(f, shifted)

        f_plus, k_plus = at(eps)
        f_minus, k_minus = at(-eps)
        _, k_far_plus = at(10 * eps)
        _, k_far_minus = at(-10 * eps)
        if not all(_same_pattern(centre, k) for k in (k_plus, k_minus, k_far_plus, k_far_minus)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[which][pos])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(f, params, eps: float = 1e-5, probes: int = 100, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return check_gradients(f, params, eps, probes, seed).max_rel_error
