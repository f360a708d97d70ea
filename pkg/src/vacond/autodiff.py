"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together with
a closure that propagates the output gradient to the inputs. ``backward`` runs
those closures in exact reverse order. Outside a tape the same functions are
plain numpy calls, which is what inference uses.

Binary operations require identical shapes; the only broadcast allowed is a
Python scalar against a tensor. Row-vector bias addition is the explicit
:func:`bias_add` op.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, empty tape...)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


_TAPES: list["Tape"] = []


class Tape:
    """Records executed operations for reverse-mode accumulation.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.ops: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def reset(self) -> None:
        self.ops.clear()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in place: g may be shared with another input
    t.grad = g if t.grad is None else t.grad + g


def _record(inputs: Sequence, out: Tensor, fn: Callable[[], None]) -> Tensor:
    if _TAPES:
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                out.requires_grad = True
                _TAPES[-1].ops.append(fn)
                break
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or np.float64))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.data.shape} by {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record((a, b), out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` for x [batch, in], w [out, in], b [out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match weight {w.data.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y += b.data
    out = Tensor(y)

    def backward():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _record((x, w, b), out, backward)


def bmv(x: Tensor, w: Tensor) -> Tensor:
    """Per-item matrix-vector product: x [B, k], w [B, n, k] -> [B, n]."""
    if (
        x.data.ndim != 2
        or w.data.ndim != 3
        or w.data.shape[0] != x.data.shape[0]
        or w.data.shape[2] != x.data.shape[1]
    ):
        raise ShapeError(f"bmv: input {x.data.shape} incompatible with weights {w.data.shape}")
    out = Tensor(np.einsum("bnk,bk->bn", w.data, x.data))

    def backward():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, np.einsum("bnk,bn->bk", w.data, g))
        if w.requires_grad:
            _accum(w, g[:, :, None] * x.data[:, None, :])

    return _record((x, w), out, backward)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add a row vector b [n] to every row of a [batch, n]."""
    if a.data.ndim != 2 or b.data.shape != (a.data.shape[1],):
        raise ShapeError(f"bias_add: {a.data.shape} and bias {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _record((a, b), out, backward)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_affine(a, 1.0, float(b))
    if not isinstance(a, Tensor):
        return _scalar_affine(b, 1.0, float(a))
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _record((a, b), out, backward)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_affine(a, 1.0, -float(b))
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _record((a, b), out, backward)


def rsub(a: Tensor, c: float) -> Tensor:
    """c - a."""
    return _scalar_affine(a, -1.0, float(c))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_affine(a, float(b), 0.0)
    if not isinstance(a, Tensor):
        return _scalar_affine(b, float(a), 0.0)
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _record((a, b), out, backward)


def _scalar_affine(a: Tensor, scale: float, shift: float) -> Tensor:
    if scale == 1.0:
        y = a.data + shift
    elif shift == 0.0:
        y = a.data * scale
    else:
        y = a.data * scale + shift
    out = Tensor(y)

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g if scale == 1.0 else g * scale)

    return _record((a,), out, backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _record((a,), out, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically safe for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor(y)

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _record((a,), out, backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, np.where(pos, g, slope * g))

    return _record((a,), out, backward)


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g * np.sign(a.data))

    return _record((a,), out, backward)


ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "abs": absolute,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------- structural


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def backward():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _record((a,), out, backward)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward():
        g = out.grad
        if g is None:
            return
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                _accum(t, part)

    return _record(ts, out, backward)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def backward():
        g = out.grad
        if g is None:
            return
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _record(ts, out, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _record((a,), out, backward)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()))

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, np.full_like(a.data, g))

    return _record((a,), out, backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()))

    def backward():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, np.full_like(a.data, g / n))

    return _record((a,), out, backward)


def custom(inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap an externally computed value with a hand-written vector-Jacobian product.

    ``vjp(g)`` returns one gradient array (or None) per input.
    """
    out = Tensor(value)

    def backward():
        g = out.grad
        if g is None:
            return
        for t, gi in zip(inputs, vjp(g)):
            if gi is not None and t.requires_grad:
                _accum(t, gi)

    return _record(inputs, out, backward)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable / frozen parameters with accumulate-until-reset gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True, dtype=np.float64) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=dtype)
        if arr.ndim == 0:
            raise ShapeError(f"parameter {name!r} must have at least one dimension")
        t = Tensor(arr, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def set(self, name: str, value) -> None:
        t = self._params[name]
        arr = np.asarray(value, dtype=t.data.dtype)
        if arr.shape != t.data.shape:
            raise ShapeError(f"parameter {name!r}: shape {t.data.shape} is immutable, got {arr.shape}")
        t.data = arr.copy()

    def freeze(self, name: str) -> None:
        self._params[name].requires_grad = False

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        for t in self._params.values():
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)

    def num_trainable(self) -> int:
        return sum(t.data.size for t in self._params.values() if t.requires_grad)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.set(k, v)

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None


def backward(tape: Tape, loss: Tensor, params: ParamStore | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls until :meth:`ParamStore.zero_grad`. The
    tape is consumed. When ``params`` is given, trainable parameters not
    reachable from ``loss`` receive an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not tape.ops:
        raise TapeError("backward called on an empty tape")
    if not loss.requires_grad:
        raise TapeError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape.ops):
        fn()
    tape.reset()
    if params is not None:
        params.fill_missing_grads()


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5, index: Iterable | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (modified in place, restored)."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


def xavier_bound(fan_in: int) -> float:
    return 1.0 / math.sqrt(max(fan_in, 1))
