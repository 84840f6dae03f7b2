"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions.  When a :class:`Tape` is active and at least one
input requires a gradient, the operation appends a record holding its inputs,
its output and a closure mapping the output gradient to input gradients.
``Tape.backward`` replays the records in exact reverse order.

Broadcasting is deliberately limited to two cases: identical shapes, and a
matrix combined with a row vector (``n x d`` with ``d``).
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# All operation outputs are checked for NaN/Inf when this is set.
CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class EvaluationError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        if _alloc.active:
            _alloc.track(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for readability in model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# allocation accounting (used by the benchmark harness)


class _AllocationCounter:
    def __init__(self):
        self.active = False
        self.live = 0
        self.peak = 0
        self.total = 0

    def track(self, t: Tensor) -> None:
        nbytes = t.data.nbytes
        self.live += nbytes
        self.total += nbytes
        self.peak = max(self.peak, self.live)
        weakref.finalize(t, self._release, nbytes)

    def _release(self, nbytes: int) -> None:
        self.live -= nbytes


_alloc = _AllocationCounter()


@contextmanager
def track_allocations():
    """Count bytes held by tensors created inside the block.

    Yields the counter; ``peak`` is the high-water mark of live tensor bytes
    relative to the start of the block.
    """
    prev = _alloc.active
    _alloc.active = True
    _alloc.live = _alloc.peak = _alloc.total = 0
    try:
        yield _alloc
    finally:
        _alloc.active = prev


# ---------------------------------------------------------------------------
# tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate ``d output`` back through every record on this tape.

        Leaf tensors with ``requires_grad`` accumulate into ``.grad`` so several
        tapes (one per sample) can contribute to one batch gradient.
        """
        if seed is None:
            if output.data.size != 1:
                raise ShapeError(f"backward needs a scalar output or an explicit seed, got {output.shape}")
            seed = np.ones_like(output.data)
        produced = {id(r.output) for r in self.records}
        # intermediate grads are local to this pass; leaves accumulate
        local: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=DTYPE)}
        for rec in reversed(self.records):
            g = local.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in local:
                        local[key] = local[key] + ig
                    else:
                        local[key] = ig
                else:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    saved = _stack()[:]
    _stack().clear()
    try:
        yield
    finally:
        _stack().extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(Record(op, inputs, res, backward))
    return res


# ---------------------------------------------------------------------------
# primitives


def _row_case(a: np.ndarray, b: np.ndarray, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    row = _row_case(a.data, b.data, "add")

    def back(g):
        return g, (g.sum(axis=0) if row else g)

    return _emit("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    row = _row_case(a.data, b.data, "sub")

    def back(g):
        return g, -(g.sum(axis=0) if row else g)

    return _emit("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    row = _row_case(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def back(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=0) if row else gb)

    return _emit("mul", ad * bd, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or (ad.ndim == 1 and bd.ndim == 1):
        raise ShapeError(f"matmul: unsupported operand ranks {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {ad.shape} and {bd.shape}")

    def back(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return bd @ g, np.outer(ad, g)

    return _emit("matmul", ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def squared_relu(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0.0)
    return _emit("squared_relu", r * r, (x,), lambda g: (2.0 * g * r,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    e = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("softplus", out, (x,), lambda g: (g * sig,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` (last axis) then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} for rows of width {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), back)


def _softmax(xd: np.ndarray) -> np.ndarray:
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    out = _softmax(x.data)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (x,), back)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under ``softmax(logits)``."""
    ld = logits.data
    if ld.ndim != 1 or not 0 <= label < ld.shape[0]:
        raise ShapeError(f"cross_entropy: label {label} for logits {ld.shape}")
    m = ld.max()
    lse = m + np.log(np.exp(ld - m).sum())
    p = np.exp(ld - lse)

    def back(g):
        d = p.copy()
        d[label] -= 1.0
        return (g * d,)

    return _emit("cross_entropy", np.asarray(lse - ld[label]), (logits,), back)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of a matrix, ``n x d -> d``."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise ShapeError("mean_rows of an empty matrix")
    return _emit("mean_rows", x.data.mean(axis=0),
                 (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, np.asarray(g).reshape(-1)[0]),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [p.data for p in parts]
    out = np.concatenate(arrs, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(parts), back)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("columns", x.data[..., start:stop].copy(), (x,), back)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", x.data[idx], (x,), back)


def gather_mix(x: Tensor, neighbor: np.ndarray, mu: float) -> Tensor:
    """``out[t, c] = (1 - mu) * x[t, c] + mu * x[neighbor[t, c], c]``.

    ``neighbor`` is an integer array with the shape of ``x``; this is the
    linear core of the directional token shift.
    """
    xd = x.data
    nb = np.asarray(neighbor, dtype=np.intp)
    if nb.shape != xd.shape:
        raise ShapeError(f"gather_mix: neighbor table {nb.shape} for input {xd.shape}")
    cols = np.broadcast_to(np.arange(xd.shape[1]), xd.shape)
    out = (1.0 - mu) * xd + mu * xd[nb, cols]

    def back(g):
        dx = (1.0 - mu) * g
        np.add.at(dx, (nb, cols), mu * g)
        return (dx,)

    return _emit("gather_mix", out, (x,), back)


def convex_mix(g: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``g * a + (1 - g) * b`` for gates ``g`` in [0, 1].

    The result is clamped to ``[min(a, b), max(a, b)]`` so rounding can never
    push it outside the segment; gradients are those of the unclamped form.
    """
    ad, bd, gd = a.data, b.data, g.data
    if not (ad.shape == bd.shape == gd.shape):
        raise ShapeError(f"convex_mix: shapes {gd.shape}, {ad.shape}, {bd.shape}")
    out = np.clip(bd + gd * (ad - bd), np.minimum(ad, bd), np.maximum(ad, bd))

    def back(gr):
        return gr * (ad - bd), gr * gd, gr * (1.0 - gd)

    return _emit("convex_mix", out, (g, a, b), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def custom(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Register an operation whose backward pass is supplied by the caller."""
    return _emit(op, out, inputs, backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` takes no arguments and must read ``params`` by reference, returning a
    scalar tensor.  The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-6, 1e-3]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise EvaluationError(f"objective is not a finite scalar: {out.data!r}")
    tape.backward(out)

    def evaluate() -> float:
        with no_grad():
            v = f().data
        if not np.isfinite(v).all():
            raise EvaluationError("objective became non-finite under perturbation")
        return float(v.reshape(-1)[0])

    worst = 0.0
    for p in plist:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
