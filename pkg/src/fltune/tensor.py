"""Dense float64 tensors with a reverse-mode differentiation tape.

Ops record onto the innermost active ``Tape``; ``Tape.backward`` replays the
records in reverse order. ``check_gradients`` is the central finite-difference
oracle used to validate every backward formula in the package.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


# Innermost active tape last. Tapes are confined to a single thread; tensors
# themselves are plain data and may be shared read-only across threads.
_TAPES: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients.

    ``requires_grad`` marks trainable leaves. Tensors produced by ops while a
    tape is active become tracked whenever any input is tracked or trainable,
    so frozen leaves never have gradients computed or buffers allocated.
    Zero-size dimensions are legal (the degenerate zero-unit adapter relies
    on them).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d; only copy
            # when actually needed so scalar losses keep their shape
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tracked = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def needs_grad(self) -> bool:
        return self.requires_grad or self._tracked

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. Using a fresh tape per training step guarantees no
    gradient state leaks across steps. A tape must stay on one thread.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Populate ``grad`` on every trainable tensor reachable from ``loss``.

        Returns the map of trainable tensors to their gradients. Frozen
        tensors receive no grad buffer at all.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        # id() keys are stable here: every keyed tensor stays alive via the
        # record list for the lifetime of this call.
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, bw in reversed(self._records):
            g = acc.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, bw(g)):
                if gi is None:
                    continue
                prev = acc.get(id(t))
                acc[id(t)] = gi if prev is None else prev + gi
                if t.requires_grad:
                    leaves[id(t)] = t
        grad_map: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = acc[key]
            t.grad = g if t.grad is None else t.grad + g
            grad_map[t] = t.grad
        return grad_map


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.needs_grad() for t in inputs):
        out._tracked = True
        tape._records.append((out, inputs, bw))
    return out


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` for 2-d operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        ga = g @ b.data.T if a.needs_grad() else None
        gb = a.data.T @ g if b.needs_grad() else None
        return ga, gb

    return _record(out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {x.data.shape}")
    out = Tensor(x.data.T)

    def bw(g):
        return (g.T if x.needs_grad() else None,)

    return _record(out, (x,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1xN row bias against an MxN left operand.

    That row-vector case is the only broadcasting supported anywhere.
    """
    if a.data.shape == b.data.shape:
        row_bias = False
    elif (a.data.ndim == 2 and b.data.ndim == 2
          and b.data.shape == (1, a.data.shape[1])):
        row_bias = True
    else:
        raise ShapeError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bw(g):
        ga = g if a.needs_grad() else None
        if not b.needs_grad():
            gb = None
        elif row_bias:
            gb = g.sum(axis=0, keepdims=True)
        else:
            gb = g
        return ga, gb

    return _record(out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s)

    def bw(g):
        return (g * s if x.needs_grad() else None,)

    return _record(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is fixed to 0.

    Finite-difference checks must avoid the kink; random inputs away from 0
    do that with probability one.
    """
    out = Tensor(np.maximum(x.data, 0.0))

    def bw(g):
        return (g * (x.data > 0.0) if x.needs_grad() else None,)

    return _record(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction so huge logits cannot overflow."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def bw(g):
        if not x.needs_grad():
            return (None,)
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (x,), bw)


def concat(a: Tensor, b: Tensor, axis: str) -> Tensor:
    """Block concatenation along ``"rows"`` or ``"cols"``.

    The backward pass splits the incoming gradient back to the two blocks.
    """
    if axis not in ("rows", "cols"):
        raise ShapeError(f"concat axis must be 'rows' or 'cols', got {axis!r}")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"concat needs 2-d tensors, got {a.data.shape} and {b.data.shape}")
    ax = 0 if axis == "rows" else 1
    other = 1 - ax
    if a.data.shape[other] != b.data.shape[other]:
        raise ShapeError(
            f"concat along {axis}: non-concat dimension disagrees: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=ax))
    split = a.data.shape[ax]

    def bw(g):
        if ax == 0:
            ga, gb = g[:split], g[split:]
        else:
            ga, gb = g[:, :split], g[:, split:]
        return (ga if a.needs_grad() else None,
                gb if b.needs_grad() else None)

    return _record(out, (a, b), bw)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"row_slice needs a 2-d tensor, got {x.data.shape}")
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"row_slice [{start}:{stop}] out of range for shape {x.data.shape}")
    out = Tensor(x.data[start:stop].copy())

    def bw(g):
        if not x.needs_grad():
            return (None,)
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, (x,), bw)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of an embedding table; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat id sequence, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather_rows id out of range [0, {table.data.shape[0]}): {ids}")
    out = Tensor(table.data[idx])

    def bw(g):
        if not table.needs_grad():
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by a learned affine map.

    ``eps`` keeps the variance denominator away from zero on constant rows.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-d tensor, got {x.data.shape}")
    n = x.data.shape[1]
    if gain.data.shape != (1, n) or bias.data.shape != (1, n):
        raise ShapeError(
            f"layer_norm gain/bias must be (1, {n}), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = Tensor(gain.data * xhat + bias.data)

    def bw(g):
        gx = gg = gb = None
        if gain.needs_grad():
            gg = (g * xhat).sum(axis=0, keepdims=True)
        if bias.needs_grad():
            gb = g.sum(axis=0, keepdims=True)
        if x.needs_grad():
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            gx = (dxhat - m1 - xhat * m2) / std
        return gx, gg, gb

    return _record(out, (x, gain, bias), bw)


def cross_entropy_mean(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross entropy of row-wise logits against integer labels.

    Log-softmax uses max subtraction, so arbitrarily large logits stay finite.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean needs 2-d logits, got {logits.data.shape}")
    y = np.asarray(labels, dtype=np.intp)
    m, c = logits.data.shape
    if y.shape != (m,):
        raise ShapeError(f"labels must have length {m}, got shape {y.shape}")
    if m == 0:
        raise ShapeError("cross_entropy_mean needs at least one row")
    if y.min() < 0 or y.max() >= c:
        raise ShapeError(f"label out of range [0, {c}): {labels}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(m), y]
    out = Tensor(np.asarray((lse - picked).mean()))

    def bw(g):
        if not logits.needs_grad():
            return (None,)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), y] -= 1.0
        return (p * (float(g) / m),)

    return _record(out, (logits,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()))

    def bw(g):
        return (np.full_like(x.data, float(g)) if x.needs_grad() else None,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int = 20,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar tensor and must read ``x.data`` live on
    every call (it is fine for ``f`` to close over a larger model that shares
    ``x``). For tensors larger than ``max_coords`` elements, that many
    coordinates are sampled at random instead of probing every one.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    rng = np.random.default_rng(0) if rng is None else rng

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            tape.backward(y)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad

    n = x.data.size
    if n == 0:
        return 0.0
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = rng.choice(n, size=max_coords, replace=False)

    flat = x.data.reshape(-1)
    flat_analytic = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x).item()
        flat[i] = orig - eps
        f_minus = f(x).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(flat_analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
