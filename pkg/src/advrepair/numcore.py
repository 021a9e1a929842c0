"""Minimal reverse-mode autodiff over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how inference runs. Gradients are dense
float64 arrays accumulated on ``Tensor.grad``.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
PROB_EPS = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "advrepair_active_tape", default=None
)


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameters."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are appended in execution
    order, which is therefore a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def _wrap(values) -> Tensor:
    # op outputs are almost always float64 arrays already; skip Tensor.__init__
    if type(values) is not np.ndarray or values.dtype != DTYPE:
        values = np.asarray(values, dtype=DTYPE)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = False
    out.grad = None
    out.name = None
    return out


def _record(out_values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape.get()
    out = _wrap(out_values)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(inputs, out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate; call ``zero_grad`` between steps.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    # Interior (non-leaf) gradients live here so leaves accumulate across calls.
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = inp.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.values)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.values), (x,), lambda g: (g / x.values,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.values, b.values)

    def bw(g):
        av, bv = a.values, b.values
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            lead = tuple(range(g.ndim))
            return ga, np.tensordot(g, av, axes=(lead, lead))
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.values for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tensors, bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.values[index]

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(out, dtype=DTYPE), (x,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    out = table.values[ids]

    def bw(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.values.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is true, ``b`` elsewhere (mask is constant)."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(mask, a.values, b.values)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# softmax family and losses
# ---------------------------------------------------------------------------


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.values, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.values)
    return _record(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over leading rows.

    ``logits`` is ``[N, V]`` (or ``[V]`` with a scalar target). Probabilities are
    clamped to ``[PROB_EPS, 1 - PROB_EPS]`` before the log; clamped entries
    receive no gradient.
    """
    squeeze = logits.ndim == 1
    lv = logits.values[None, :] if squeeze else logits.values
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, v = lv.shape
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if np.any(t < 0) or np.any(t >= v):
        raise IndexError(f"target id out of range for vocabulary of size {v}")
    w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy needs a positive total weight")

    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = (shifted - lse)[np.arange(n), t]
    lo, hi = math.log(PROB_EPS), math.log1p(-PROB_EPS)
    clamped = (logp < lo) | (logp > hi)
    per = -np.clip(logp, lo, hi)
    out = (w * per).sum() / total

    def bw(g):
        probs = np.exp(shifted - lse)
        probs[np.arange(n), t] -= 1.0
        scale = np.where(clamped, 0.0, w / total)[:, None]
        gl = g * probs * scale
        return (gl[0] if squeeze else gl,)

    return _record(np.asarray(out), (logits,), bw)


def bce(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels."""
    y = np.broadcast_to(np.asarray(labels, dtype=DTYPE), p.shape)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ContractError("bce labels must be 0 or 1")
    pv = p.values
    pc = np.clip(pv, PROB_EPS, 1.0 - PROB_EPS)
    per = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    n = max(per.size, 1)
    out = per.sum() / n
    inside = (pv >= PROB_EPS) & (pv <= 1.0 - PROB_EPS)

    def bw(g):
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        return (g * np.where(inside, d, 0.0),)

    return _record(np.asarray(out), (p,), bw)


def loss(kind: str, *args, **kwargs) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(*args, **kwargs)
    if kind == "bce":
        return bce(*args, **kwargs)
    raise ConfigError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# stochastic
# ---------------------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) for a seed or SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return _record(x.values * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    grads: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update in place; zeroes the parameter grads."""
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name!r} has shape {g.shape}, param has {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in params])))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def numerical_grad(f: Callable[[], float], x: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of a scalar function with respect to ``x.values``.

    ``f`` is evaluated by perturbing ``x.values`` in place. When ``indices`` is
    given, only those flat positions are estimated (others are left NaN).
    """
    grad = np.full(x.values.size, np.nan)
    flat = x.values.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    with no_tape():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def check_gradients(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Returns the maximum relative error per parameter. ``f`` must be
    deterministic (reseed any dropout stream inside it).
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        out = f()
    backward(out, tape)
    report = {}
    for name, p in params.items():
        idx = None
        if max_entries is not None and p.values.size > max_entries:
            r = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(r.choice(p.values.size, size=max_entries, replace=False))
        num = numerical_grad(lambda: f().item(), p, step=step, indices=idx)
        ana = p.grad.reshape(-1)
        numf = num.reshape(-1)
        sel = np.arange(numf.size) if idx is None else idx
        report[name] = float(relative_error(ana[sel], numf[sel]).max()) if len(sel) else 0.0
        p.zero_grad()
    return report
