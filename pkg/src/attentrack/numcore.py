"""Dense 2-D tensors with reverse-mode autodiff, plus AdamW with a one-cycle schedule.

Everything is float64. A tensor records the op that produced it (its parents and a
closure that pushes the output gradient back to them); :func:`backward` builds the
tape by topologically sorting that graph and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(RuntimeError):
    """An operation was called outside its documented contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row broadcast over the rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return _result(a.data + b.data, (a, b), backward)
    if _bias_compatible(a, b):
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))
        return _result(a.data + b.data, (a, b), backward)
    if b.size == 1 and b.data.ndim == 0:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(np.sum(g))
        return _result(a.data + b.data, (a, b), backward)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product, same shapes or bias-row broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        return _result(a.data * b.data, (a, b), backward)
    if _bias_compatible(a, b):
        def backward(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate((g * a.data).sum(axis=0))
        return _result(a.data * b.data, (a, b), backward)
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)
    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")

    def backward(g):
        a._accumulate(g.T)
    return _result(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))
    return _result(a.data.reshape(shape).copy(), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)
    return _result(np.where(mask, a.data, 0.0), (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(2.0 * a.data * g)
    return _result(a.data * a.data, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full(a.shape, float(g)))
    return _result(np.array(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        a._accumulate(np.full(a.shape, float(g) / n))
    return _result(np.array(a.data.mean()), (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors (or 1-D rows) vertically."""
    parts = [as_tensor(p) for p in parts]
    mats = [p.data.reshape(1, -1) if p.data.ndim == 1 else p.data for p in parts]
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: mixed widths {[m.shape for m in mats]}")
    bounds = np.cumsum([0] + [m.shape[0] for m in mats])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi].reshape(p.shape))
    return _result(np.vstack(mats), parts, backward)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)
    return _result(a.data[idx], (a,), backward)


def where_rows(mask, a: Tensor, b: Tensor) -> Tensor:
    """Row ``i`` of the result is ``a[i]`` where ``mask[i]`` else ``b[i]`` (exact copy)."""
    if a.shape != b.shape:
        raise DimensionError(f"where_rows: {a.shape} vs {b.shape}")
    m = np.asarray(mask, dtype=bool).reshape(-1, 1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(m, g, 0.0))
        if b.requires_grad:
            b._accumulate(np.where(m, 0.0, g))
    return _result(np.where(m, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# normalising ops (fused forward/backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over empty last axis, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))
    return _result(s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax over empty last axis, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        x._accumulate(g - s * g.sum(axis=-1, keepdims=True))
    return _result(out, (x,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``.

    ``logits`` of shape ``(k,)`` takes a single integer target. For shape ``(n, k)``
    ``target`` is a length-``n`` sequence and the mean over rows is returned.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    rows = logits.data.reshape(1, -1) if single else logits.data
    tgt = np.atleast_1d(np.asarray(target))
    if tgt.dtype.kind not in "iu":
        raise IndexError(f"cross_entropy targets must be integers, got {tgt.dtype}")
    n, k = rows.shape
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {tgt.shape[0]} targets")
    if k == 0:
        raise DimensionError("cross_entropy over zero classes")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexError(f"cross_entropy target out of range 0..{k - 1}: {tgt.tolist()}")
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), tgt]
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), tgt] -= 1.0
        d *= float(g) / n
        logits._accumulate(d.reshape(logits.shape))
    return _result(np.array(losses.mean()), (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalisation followed by the affine ``gamma * xhat + beta``."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=1, keepdims=True))
            x._accumulate(dx)
    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Returns the tape (topological order, inputs before outputs) that was replayed.
    Gradients accumulate, so call ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tensor that requires grad")
    tape = _topological(loss)
    # only leaves keep .grad; intermediates are cleared once propagated
    for node in tape:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None
    return tape


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


# ---------------------------------------------------------------------------
# optimisation


def one_cycle(pos: float, max_lr: float = 1e-3, warmup: float = 0.3,
              div_start: float = 25.0, div_final: float = 1e4,
              beta1_range: tuple[float, float] = (0.85, 0.95)) -> tuple[float, float]:
    """Learning rate and beta1 at schedule position ``pos`` in [0, 1].

    Linear warmup from ``max_lr/div_start`` to ``max_lr`` over the first ``warmup``
    fraction, cosine decay to ``max_lr/div_final`` after. beta1 moves the opposite way
    between the two ends of ``beta1_range``.
    """
    if not 0.0 <= pos <= 1.0 or math.isnan(pos):
        raise ValueError(f"schedule position must be in [0, 1], got {pos}")
    lo_b, hi_b = beta1_range
    start, end = max_lr / div_start, max_lr / div_final
    if pos <= warmup:
        frac = pos / warmup if warmup > 0 else 1.0
        return start + (max_lr - start) * frac, hi_b - (hi_b - lo_b) * frac
    frac = (pos - warmup) / (1.0 - warmup)
    c = 0.5 * (1.0 + math.cos(math.pi * frac))
    return end + (max_lr - end) * c, hi_b - (hi_b - lo_b) * c


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    schedule_pos: float = 0.0


class AdamW:
    """AdamW with decoupled weight decay driven by :func:`one_cycle`."""

    def __init__(self, params: dict[str, Tensor], max_lr: float = 1e-3,
                 weight_decay: float = 0.01, beta1_range=(0.85, 0.95),
                 beta2: float = 0.999, eps: float = 1e-8, warmup: float = 0.3):
        self.params = dict(params)
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.beta1_range = tuple(beta1_range)
        self.beta2 = beta2
        self.eps = eps
        self.warmup = warmup
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, schedule_pos: float) -> None:
        adamw_step(self.params, self.state, schedule_pos, max_lr=self.max_lr,
                   weight_decay=self.weight_decay, beta1_range=self.beta1_range,
                   beta2=self.beta2, eps=self.eps, warmup=self.warmup)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, schedule_pos: float, *,
               max_lr: float = 1e-3, weight_decay: float = 0.01,
               beta1_range=(0.85, 0.95), beta2: float = 0.999, eps: float = 1e-8,
               warmup: float = 0.3) -> float:
    """One in-place AdamW update of ``params`` from their ``.grad``; returns the lr used."""
    for name, p in params.items():
        if not p.requires_grad:
            raise ContractViolation(f"parameter {name!r} is frozen but was handed to the optimizer")
        if p.grad is None:
            raise ContractViolation(f"parameter {name!r} has no gradient")
    lr, beta1 = one_cycle(schedule_pos, max_lr, warmup, beta1_range=beta1_range)
    state.step += 1
    state.schedule_pos = schedule_pos
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise DimensionError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        p.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return lr


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
