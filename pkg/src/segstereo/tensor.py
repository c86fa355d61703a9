"""Dense tensors and a recorded reverse-mode tape.

Every differentiable operator in the package goes through :func:`record`:
it receives the forward value plus a closure mapping the upstream gradient
to one gradient per input. Recording only happens while a :class:`Tape` is
active and at least one input requires a gradient.

    with Tape() as tape:
        y = mean(mul(x, x))
    grads = backward(tape, y)
    grads[x.node_id].data
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    """Immutable N-D array with an identity on the tape.

    Shapes follow N-C-H-W for images and feature maps; lower-rank values are
    allowed (losses are 0-d).
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), copy=True)
        if arr.size == 0 or any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor that skips the defensive copy.
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; everything routes through the recorded ops below.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def _not_scalar(shape):
    raise ValueError(f"expected a single-element tensor, got shape {shape}")


class Tape:
    """Ordered list of recorded nodes; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[tuple[int, tuple[int, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


def record(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``value`` as the output of an op over ``inputs``.

    ``backward_fn(grad_out)`` must return a sequence with one entry per input:
    an array of the input's shape, or None when no gradient flows.
    """
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, needs)
    if needs:
        tape.nodes.append((out.node_id, tuple(t.node_id for t in inputs), backward_fn))
    return out


# ---------------------------------------------------------------------------
# construction

def create(shape: Sequence[int], init="zeros", *, value: float = 0.0, low: float = 0.0,
           high: float = 1.0, seed: int | None = None, values=None, dtype=np.float64,
           requires_grad: bool = False) -> Tensor:
    """Build a tensor with ``init`` in {"zeros", "constant", "uniform", "values"}."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"extents must be >= 1, got {shape}")
    n = math.prod(shape)
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        arr = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        if seed is None:
            raise ValueError("uniform init needs a seed")
        arr = np.random.default_rng(seed).uniform(low, high, size=shape).astype(dtype)
    elif init == "values":
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != n:
            raise ValueError(f"{flat.size} values do not fill shape {shape} ({n} entries)")
        arr = flat.reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(arr, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise

def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    x, y = a.data, b.data
    return record(x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return record(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return record(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return record(np.where(pos, x, 0).astype(x.dtype), (a,), lambda g: (g * pos,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, abs, relu."""
    if op == "add":
        return add(a, b) if isinstance(b, Tensor) else add_scalar(a, b)
    if op == "sub":
        return sub(a, b) if isinstance(b, Tensor) else add_scalar(a, -b)
    if op == "mul":
        return mul(a, b) if isinstance(b, Tensor) else scale(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "abs":
        return abs_(a)
    if op == "relu":
        return relu(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor, mask: Tensor | np.ndarray | None = None) -> Tensor:
    m = _mask_array(a, mask)
    x = a.data
    shape, dtype = x.shape, x.dtype
    if m is None:
        return record(np.asarray(x.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))
    return record(np.asarray((x * m).sum(), dtype=dtype), (a,), lambda g: (g * m,))


def mean(a: Tensor, mask: Tensor | np.ndarray | None = None) -> Tensor:
    """Mean over all N entries. A mask zeroes entries but N is still the total count."""
    m = _mask_array(a, mask)
    x = a.data
    n = x.size
    shape, dtype = x.shape, x.dtype
    inv = dtype.type(1.0 / n)
    if m is None:
        return record(np.asarray(x.sum() * inv, dtype=dtype), (a,), lambda g: (np.full(shape, g * inv, dtype=dtype),))
    return record(np.asarray((x * m).sum() * inv, dtype=dtype), (a,), lambda g: (g * inv * m,))


def reduce(op: str, a: Tensor, mask=None) -> Tensor:
    if op == "sum":
        return sum_(a, mask)
    if op == "mean":
        return mean(a, mask)
    raise ValueError(f"unknown reduction {op!r}")


def _mask_array(a: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != a.shape:
        raise ValueError(f"mask shape {m.shape} does not match {a.shape}")
    # stop-gradient: the mask is a plain constant array from here on
    return m.astype(a.dtype, copy=False)


# ---------------------------------------------------------------------------
# differentiation

def backward(tape: Tape, output: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``output``. Returns ``{node_id: gradient}``."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.data)}
    for out_id, in_ids, fn in reversed(tape.nodes):
        g = grads.get(out_id)
        if g is None:
            continue
        for nid, gi in zip(in_ids, fn(g)):
            if gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    return {k: Tensor._wrap(v, False) for k, v in grads.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    g = backward(tape, y)
    analytic = g[xt.node_id].data if xt.node_id in g else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(x0)).item()
        flat[i] = old - h
        fm = f(Tensor(x0)).item()
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
