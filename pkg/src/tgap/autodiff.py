"""Reverse-mode differentiation over dense numpy arrays.

Operations build :class:`Tensor` nodes. While a :class:`Tape` is active,
every node that depends on a trainable leaf is appended to it in creation
order, which is already a topological order; ``Tape.backward`` walks it in
reverse. Without an active tape nothing is recorded, so inference runs
without keeping activations alive.

    with Tape() as tape:
        loss = model_loss(...)
    tape.backward(loss)          # gradients land in Parameter.grad
"""
from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

LEAKY_SLOPE = 0.01
DEBUG = bool(os.environ.get("TGAP_DEBUG"))

_dtype = np.float64
_tapes: list["Tape"] = []


def get_dtype():
    return _dtype


def set_dtype(dtype):
    """Set the float type used for new parameters and constants."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


def constant(array, dtype=None):
    return Tensor(np.asarray(array, dtype=dtype or _dtype))


def parameter(array, name=None):
    return Tensor(np.array(array, dtype=_dtype), requires_grad=True, name=name)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def _node(data, parents, backward_fn):
    """Create an op output; record it only if a tape is active and it needs grad."""
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {backward_fn.__qualname__}")
    needs = any(p.requires_grad for p in parents)
    if not needs or not _tapes:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    _tapes[-1].nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        self.nodes.clear()


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _node(A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.data.shape} + {b.data.shape}") from None
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}") from None
    A, B = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {[p.data.shape for p in parts]}")
    widths = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    tails = {p.data.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows column mismatch: {[p.data.shape for p in parts]}")
    offs = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), backward)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.data.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")

    def backward(g):
        return (kernels.segment_sum(g, index, n),)

    return _node(a.data[index], (a,), backward)


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != values.data.shape[0]:
        raise ShapeError(f"segment_sum: values {values.data.shape} vs segment ids {seg.shape}")
    return _node(kernels.segment_sum(values.data, seg, num_segments), (values,),
                 lambda g: (g[seg],))


def segment_softmax(logits: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax of ``logits`` within each segment (per column for 2-D input)."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"segment_softmax: logits {logits.data.shape} vs segment ids {seg.shape}")
    probs = kernels.segment_softmax(logits.data, seg, num_segments)

    def backward(g):
        return (kernels.segment_softmax_backward(probs, g, seg, num_segments),)

    return _node(probs, (logits,), backward)


_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the active side of every piecewise op evaluated inside the block.

    Yields a list that is filled with one packed mask per call; two runs took
    the same branches everywhere iff the lists are equal.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    pos = x > 0
    if _branch_log is not None:
        _branch_log.append(hashlib.blake2b(np.packbits(pos).tobytes(), digest_size=16).digest())
    return _node(np.where(pos, x, slope * x), (a,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


# ------------------------------------------------------------ parameter store


class ParamStore:
    """Named trainable tensors with accumulated gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = parameter(array, name=name)
        self._params[name] = p
        return p

    def xavier(self, name: str, shape, rng: np.random.Generator) -> Tensor:
        fan_out, fan_in = shape[0], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grad(self, name):
        p = self._params[name]
        return np.zeros_like(p.data) if p.grad is None else p.grad

    def num_values(self):
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def astype(self, dtype):
        for p in self._params.values():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)


# --------------------------------------------------------- gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    flagged: int


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def flagged(self):
        return sum(p.flagged for p in self.params)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def summary(self):
        lines = [f"{p.name:<28} max_rel_err={p.max_rel_error:.3e} checked={p.checked} flagged={p.flagged}"
                 for p in self.params]
        lines.append(f"overall max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:g} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _split_result(out):
    if isinstance(out, tuple):
        return out[0], out[1]
    return out, None


_STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def _stencil(f, flat, i, h, offsets, coeffs, base):
    """Central-difference estimate at entry ``i``, or None if any point changes branches."""
    orig = flat[i]
    numeric = 0.0
    try:
        for k, c in zip(offsets, coeffs):
            flat[i] = orig + k * h
            with record_branches() as branches:
                loss, sig = _split_result(f())
            if (sig, branches) != base:
                return None
            numeric += c * float(loss.data)
    finally:
        flat[i] = orig
    return numeric / h


def finite_difference_check(f: Callable, params: ParamStore, tolerance: float = 1e-4, h: float = 1e-5,
                            atol: float = 1e-6, names: Iterable[str] | None = None,
                            max_entries: int | None = None, seed: int = 0, order: int = 2
                            ) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` returns a scalar Tensor, or ``(Tensor, signature)`` where the
    signature captures every discrete choice made during the forward pass.
    Branches of piecewise ops (LeakyReLU) are recorded as well. When a
    perturbed evaluation changes either, the stencil straddles a kink or a
    discontinuity; the entry is retried with steps h/10 and h/100 and
    flagged and excluded if every step crosses.
    The per-entry error is ``|a - n| / max(|a|, |n|, atol)``.

    ``order`` picks the central stencil: 2 (two points) or 4 (four points,
    truncation error O(h^4), which tolerates a larger ``h`` and so keeps
    round-off low when the loss itself is large).
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    offsets, coeffs = _STENCILS[order]
    params.zero_grad()
    with Tape() as tape, record_branches() as branches:
        loss, base_sig = _split_result(f())
    tape.backward(loss)
    base = (base_sig, branches)
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    for name in (names or params.names()):
        p = params[name]
        analytic = params.grad(name).copy()
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst, flagged = 0.0, 0
        for i in entries:
            numeric = None
            for step in (h, h / 10, h / 100):
                numeric = _stencil(f, flat, i, step, offsets, coeffs, base)
                if numeric is not None:
                    break
            if numeric is None:
                flagged += 1
                continue
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
        report.params.append(ParamCheck(name, worst, len(entries) - flagged, flagged))
    params.zero_grad()
    return report
