"""Tape-based reverse-mode differentiation over numpy arrays.

Only the operations the reference transformer needs are provided. All
arithmetic runs in float64; parameters arrive as float32 and are widened on
entry, which keeps reductions accurate and finite-difference checks tight.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "tape", "requires_grad", "name")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations in execution order; replays them backwards once."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def leaf(self, data, name: str | None = None, requires_grad: bool = True) -> Tensor:
        return Tensor(data, self, requires_grad, name)

    def constant(self, data) -> Tensor:
        return Tensor(data, self, False)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if out.requires_grad:
            self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        # execution order is a topological order, so reversing it visits each
        # node after every consumer of its output
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def _as_tensor(x, tape: Tape | None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, tape, False)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _result(data, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _tape_of(*parents)
    out = Tensor(_finite(data, op), tape, any(p.requires_grad for p in parents))
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, "gelu", (a,), backward)


# ---------------------------------------------------------------------------
# shape and linear algebra


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(y, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the first axis."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop], "slice_rows", (a,), backward)


def select(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Drop ``axis`` by picking one position along it (e.g. the first token)."""
    y = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(y, "select", (a,), backward)


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), backward)


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(a.shape, float(g)),))


# ---------------------------------------------------------------------------
# normalisation and losses


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        h = x.shape[-1]
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / h * (h * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(y, "layer_norm", (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _result(p, "softmax", (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean cross entropy over rows whose target is not ``ignore_index``.

    With no supervised rows the loss is 0 and the gradient is zero.
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (rows, classes) logits")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for {logits.shape[0]} rows")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n and (targets[keep].min() < 0 or targets[keep].max() >= logits.shape[1]):
        raise ShapeError("target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(keep)
    loss = -logp[rows, targets[rows]].sum() / n if n else 0.0

    def backward(g):
        grad = np.zeros_like(logits.data)
        if n:
            grad[rows] = np.exp(logp[rows])
            grad[rows, targets[rows]] -= 1.0
            grad *= float(g) / n
        return (grad,)

    return _result(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], "embedding_lookup", (table,), backward)


# ---------------------------------------------------------------------------
# dropout


def noise_generator(seed: int, step: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, tensor name)."""
    digest = hashlib.sha256(f"{int(seed)}:{int(step)}:{name}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def dropout(x: Tensor, p: float, key: tuple[int, int, str] | None) -> Tensor:
    """Inverted dropout; ``key=None`` or ``p=0`` is the identity."""
    if key is None or p <= 0.0:
        return x
    keep = noise_generator(*key).random(x.shape) >= p
    m = keep / (1.0 - p)
    return _result(x.data * m, "dropout", (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# finite differences


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    A float32 ``point`` is perturbed in float32 (the actual, rounded step is
    used as denominator); a float64 point is perturbed exactly.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point)
    if x0.dtype not in (np.float32, np.float64):
        x0 = x0.astype(np.float64)

    tape = Tape()
    leaf = tape.leaf(x0)
    out = f(leaf)
    tape.backward(out)
    analytic = np.zeros(x0.shape) if leaf.grad is None else leaf.grad

    def value(x: np.ndarray) -> float:
        return f(Tape().leaf(x, requires_grad=False)).item()

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] = flat[i] + step
        lo[i] = flat[i] - step
        h = float(hi[i]) - float(lo[i])
        numeric = (value(hi.reshape(x0.shape)) - value(lo.reshape(x0.shape))) / h
        if not np.isfinite(numeric):
            raise NonFiniteError(f"non-finite finite difference at coordinate {i}")
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
