"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive is a small class with a ``forward`` and a ``backward``; a
:class:`Tape` records each application so that :func:`backward` can visit the
records once, in reverse order.  Tensors created while no tape is active are
plain values and carry no history.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "primitive_forward",
    "backward",
    "finite_difference_check",
    "adam_step",
    "clip_by_global_norm",
    "checked_mode",
    "OPS",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf shows up where it is not allowed."""


_state = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _checked() -> bool:
    return getattr(_state, "checked", False)


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite values at tensor creation while active."""
    prev = _checked()
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    """A dense float64 array, optionally a differentiable leaf."""

    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if _checked() and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar; all of these go through the primitive table
    def __add__(self, other):
        return primitive_forward("add", self, other)

    def __radd__(self, other):
        return primitive_forward("add", other, self)

    def __sub__(self, other):
        return primitive_forward("sub", self, other)

    def __rsub__(self, other):
        return primitive_forward("sub", other, self)

    def __mul__(self, other):
        return primitive_forward("mul", self, other)

    def __rmul__(self, other):
        return primitive_forward("mul", other, self)

    def __neg__(self):
        return primitive_forward("neg", self)

    def __matmul__(self, other):
        return primitive_forward("matmul", self, other)

    def __getitem__(self, key):
        return primitive_forward("index", self, key=key)

    @property
    def T(self):
        return primitive_forward("transpose", self)


def tensor(value, name: str | None = None) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name: str | None = None) -> Tensor:
    """Differentiable leaf."""
    return Tensor(value, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeRecord:
    op: "Op"
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    cache: object


@dataclass
class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; ops executed inside are recorded when at least
    one input requires a gradient or was itself produced on this tape.
    """

    records: list[TapeRecord] = field(default_factory=list)
    _produced: set = field(default_factory=set, repr=False)
    _prev: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._prev = _current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, rec: TapeRecord) -> None:
        self.records.append(rec)
        self._produced.add(id(rec.output))

    def replay(self) -> list[bool]:
        """Recompute every record from its recorded inputs.

        Returns, per record, whether the recomputed output equals the stored
        one exactly.
        """
        out = []
        for rec in self.records:
            value, _ = rec.op.forward(*(t.value for t in rec.inputs), **rec.attrs)
            out.append(bool(np.array_equal(value, rec.output.value)))
        return out


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, *arrays: np.ndarray) -> None:
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{name}: cannot broadcast shapes {shapes}") from None


class Op:
    name = "op"

    def forward(self, *xs, **attrs):  # -> (value, cache)
        raise NotImplementedError

    def backward(self, g, cache, *xs, **attrs):  # -> tuple of grads (or None)
        raise NotImplementedError


class Add(Op):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a + b, None

    def backward(self, g, cache, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a - b, None

    def backward(self, g, cache, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a * b, None

    def backward(self, g, cache, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, None

    def backward(self, g, cache, a):
        return (-g,)


class MatMul(Op):
    """Matrix product for 1-D/2-D operands (numpy ``@`` semantics)."""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b, None

    def backward(self, g, cache, a, b):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b @ g, np.outer(a, g)
        return g * b, g * a


class Bilinear(Op):
    """Row-wise bilinear scores ``A W Bᵀ`` (``aᵀ W b`` for vectors)."""

    name = "bilinear"

    def forward(self, a, w, b):
        if w.ndim != 2 or a.shape[-1] != w.shape[0] or b.shape[-1] != w.shape[1]:
            raise ShapeError(f"bilinear: incompatible shapes {a.shape}, {w.shape}, {b.shape}")
        bw = b @ w.T  # rows of B mapped into A's space
        return a @ bw.T, bw

    def backward(self, g, bw, a, w, b):
        a2 = np.atleast_2d(a)
        b2 = np.atleast_2d(b)
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[0])
        ga = g2 @ np.atleast_2d(bw)
        gw = a2.T @ g2 @ b2
        gb = g2.T @ a2 @ w
        return ga.reshape(a.shape), gw, gb.reshape(b.shape)


class Transpose(Op):
    name = "transpose"

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected 2-D input, got {a.shape}")
        return a.T.copy(), None

    def backward(self, g, cache, a):
        return (g.T,)


class Reshape(Op):
    name = "reshape"

    def forward(self, a, shape):
        try:
            return a.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def backward(self, g, cache, a, shape):
        return (g.reshape(a.shape),)


class Sum(Op):
    name = "sum"

    def forward(self, a, axis=None):
        return np.sum(a, axis=axis), None

    def backward(self, g, cache, a, axis=None):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


class Concat(Op):
    """Concatenation ``[a ∥ b ∥ ...]`` along ``axis``."""

    name = "concat"

    def forward(self, *xs, axis=-1):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            shapes = ", ".join(str(x.shape) for x in xs)
            raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
        return out, np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(self, g, splits, *xs, axis=-1):
        return tuple(np.split(g, splits, axis=axis))


class Index(Op):
    """Basic or fancy indexing; the gradient scatters back with accumulation."""

    name = "index"

    def forward(self, a, key):
        try:
            return np.array(a[key], dtype=np.float64), None
        except IndexError as exc:
            raise ShapeError(f"index: {exc} for shape {a.shape}") from None

    def backward(self, g, cache, a, key):
        out = np.zeros_like(a)
        np.add.at(out, key, g)
        return (out,)


class Embedding(Op):
    """Row lookup ``W[ids]``."""

    name = "embedding"

    def forward(self, w, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if w.ndim != 2:
            raise ShapeError(f"embedding: table must be 2-D, got {w.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= w.shape[0]):
            raise ShapeError(f"embedding: id out of range for table with {w.shape[0]} rows")
        return w[ids], None

    def backward(self, g, cache, w, ids):
        out = np.zeros_like(w)
        np.add.at(out, ids, g)
        return (out,)


class Exp(Op):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, out

    def backward(self, g, out, a):
        return (g * out,)


class Log(Op):
    name = "log"

    def forward(self, a):
        return np.log(a), None

    def backward(self, g, cache, a):
        return (g / a,)


class ClampMin(Op):
    """``max(a, floor)``; gradient is zero where the floor is active."""

    name = "clamp_min"

    def forward(self, a, floor):
        return np.maximum(a, floor), a >= floor

    def backward(self, g, keep, a, floor):
        return (g * keep,)


class Tanh(Op):
    name = "tanh"

    def forward(self, a):
        out = np.tanh(a)
        return out, out

    def backward(self, g, out, a):
        return (g * (1.0 - out * out),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, a):
        out = _sigmoid(np.atleast_1d(a)).reshape(a.shape)
        return out, out

    def backward(self, g, out, a):
        return (g * out * (1.0 - out),)


class LogSigmoid(Op):
    name = "log_sigmoid"

    def forward(self, a):
        return -np.logaddexp(0.0, -a), None

    def backward(self, g, cache, a):
        s = _sigmoid(np.atleast_1d(-a)).reshape(a.shape)
        return (g * s,)


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class Softmax(Op):
    name = "softmax"

    def forward(self, a, axis=-1):
        out = _softmax(a, axis)
        return out, out

    def backward(self, g, out, a, axis=-1):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, a, axis=-1):
        z = a - np.max(a, axis=axis, keepdims=True)
        out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        return out, out

    def backward(self, g, out, a, axis=-1):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


class MaskedSoftmax(Op):
    """Row softmax over the entries where ``mask`` is true.

    Rows without any allowed entry produce all zeros.
    """

    name = "masked_softmax"

    def forward(self, a, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {a.shape}")
        z = np.where(mask, a, -np.inf)
        m = np.max(z, axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(z - m), 0.0)
        s = np.sum(e, axis=-1, keepdims=True)
        out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
        return out, out

    def backward(self, g, out, a, mask):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


class TemporalLogNormalizer(Op):
    """Per-column log of the sum of exponentiated *earlier* rows.

    Row ``t`` of the output is ``log Σ_{j<t} exp(a[j])``; row 0 is 0, which
    makes ``a - out`` the log of the temporally normalized scores with the
    first step left unnormalized.
    """

    name = "temporal_log_normalizer"

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"temporal_log_normalizer: expected 2-D scores, got {a.shape}")
        out = np.zeros_like(a)
        if a.shape[0] > 1:
            out[1:] = np.logaddexp.accumulate(a, axis=0)[:-1]
        return out, out

    def backward(self, g, out, a):
        T = a.shape[0]
        grad = np.zeros_like(a)
        if T < 2:
            return (grad,)
        # weights w[t, j, i] = exp(a[j, i] - out[t, i]) for j < t
        w = np.exp(a[None, :, :] - out[:, None, :])
        w *= np.tril(np.ones((T, T), dtype=bool), k=-1)[:, :, None]
        w[0] = 0.0
        grad = np.einsum("ti,tji->ji", g, w)
        return (grad,)


def _lstm_gates(pre: np.ndarray, c_prev: np.ndarray):
    H = c_prev.shape[-1]
    i = _sigmoid(pre[..., :H])
    f = _sigmoid(pre[..., H : 2 * H])
    gg = np.tanh(pre[..., 2 * H : 3 * H])
    o = _sigmoid(pre[..., 3 * H :])
    c = f * c_prev + i * gg
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, gg, o, tc)


class LSTMSequence(Op):
    """Unrolled LSTM over precomputed input projections.

    Inputs: ``xproj`` (T, 4H) already containing ``Wx x_t + b``, initial
    ``h0``/``c0`` (H,), recurrent matrix ``wh`` (4H, H).  Gate order is
    input, forget, candidate, output.  Output row ``t`` is ``[h_t ∥ c_t]``.
    """

    name = "lstm_sequence"

    def forward(self, xproj, h0, c0, wh):
        H = h0.shape[0]
        if xproj.ndim != 2 or xproj.shape[1] != 4 * H or c0.shape != (H,) or wh.shape != (4 * H, H):
            raise ShapeError(
                f"lstm_sequence: xproj {xproj.shape}, h0 {h0.shape}, c0 {c0.shape}, wh {wh.shape}"
            )
        T = xproj.shape[0]
        out = np.empty((T, 2 * H))
        gates = []
        h, c = h0, c0
        for t in range(T):
            h, c, gts = _lstm_gates(xproj[t] + wh @ h, c)
            out[t, :H] = h
            out[t, H:] = c
            gates.append(gts)
        return out, (gates, out)

    def backward(self, g, cache, xproj, h0, c0, wh):
        gates, out = cache
        H = h0.shape[0]
        T = xproj.shape[0]
        gx = np.empty_like(xproj)
        gwh = np.zeros_like(wh)
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            i, f, gg, o, tc = gates[t]
            c_prev = c0 if t == 0 else out[t - 1, H:]
            h_prev = h0 if t == 0 else out[t - 1, :H]
            dh = g[t, :H] + dh_next
            dc = g[t, H:] + dc_next + dh * o * (1.0 - tc * tc)
            dpre = np.concatenate(
                [
                    dc * gg * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - gg * gg),
                    dh * tc * o * (1.0 - o),
                ]
            )
            gx[t] = dpre
            gwh += np.outer(dpre, h_prev)
            dh_next = wh.T @ dpre
            dc_next = dc * f
        return gx, dh_next, dc_next, gwh


OPS: dict[str, Op] = {
    op.name: op
    for op in (
        Add(), Sub(), Mul(), Neg(), MatMul(), Bilinear(), Transpose(), Reshape(),
        Sum(), Concat(), Index(), Embedding(), Exp(), Log(), ClampMin(), Tanh(),
        Sigmoid(), LogSigmoid(), Softmax(), LogSoftmax(), MaskedSoftmax(),
        TemporalLogNormalizer(), LSTMSequence(),
    )
}


def primitive_forward(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` and record it on the active tape."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    value, cache = op.forward(*(t.value for t in tensors), **attrs)
    out = Tensor(value)
    tape = _current_tape()
    if tape is not None and any(tape.tracks(t) for t in tensors):
        tape.record(TapeRecord(op, tensors, out, attrs, cache))
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf on ``tape``.

    Leaves listed in ``params`` but never touched get zero gradients.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.op.backward(g, rec.cache, *(t.value for t in rec.inputs), **rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not tape.tracks(t):
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    out = {leaves[k]: grads[k] for k in leaves}
    for p in params:
        if p not in out:
            out[p] = np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-3,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``fn`` is evaluated at perturbed copies of ``point``; ``coords`` limits the
    check to a subset of coordinates (all of them by default).
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(point.shape))
    worst = 0.0
    for idx in coords:
        orig = point[idx]
        point[idx] = orig + step
        fp = fn(point)
        point[idx] = orig - step
        fm = fn(point)
        point[idx] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {params[name].shape} for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# convenience wrappers used throughout the model code
def matmul(a, b): return primitive_forward("matmul", a, b)
def bilinear(a, w, b): return primitive_forward("bilinear", a, w, b)
def concat(xs, axis=-1): return primitive_forward("concat", *xs, axis=axis)
def softmax(a, axis=-1): return primitive_forward("softmax", a, axis=axis)
def log_softmax(a, axis=-1): return primitive_forward("log_softmax", a, axis=axis)
def masked_softmax(a, mask): return primitive_forward("masked_softmax", a, mask=mask)
def sigmoid(a): return primitive_forward("sigmoid", a)
def log_sigmoid(a): return primitive_forward("log_sigmoid", a)
def tanh(a): return primitive_forward("tanh", a)
def exp(a): return primitive_forward("exp", a)
def log(a): return primitive_forward("log", a)
def clamp_min(a, floor): return primitive_forward("clamp_min", a, floor=floor)
def embedding(w, ids): return primitive_forward("embedding", w, ids=np.asarray(ids, dtype=np.int64))
def tsum(a, axis=None): return primitive_forward("sum", a, axis=axis)
def reshape(a, shape): return primitive_forward("reshape", a, shape=tuple(shape))
def temporal_log_normalizer(a): return primitive_forward("temporal_log_normalizer", a)
def lstm_sequence(xproj, h0, c0, wh): return primitive_forward("lstm_sequence", xproj, h0, c0, wh)
