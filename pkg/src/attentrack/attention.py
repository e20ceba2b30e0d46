"""Neural building blocks: single-head cross-attention, a 2-layer MLP, heading embedding."""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor


class EmptyContextError(ValueError):
    """Cross-attention was asked to attend over zero key/value rows."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Minimal parameter container; sub-modules and Tensors are found by attribute."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"linear expects width {self.d_in}, got input {x.shape}")
        y = nc.matmul(x, self.weight)
        return y if self.bias is None else nc.add(y, self.bias)


class Mlp2(Module):
    """affine -> ReLU -> affine, applied row-wise."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    @property
    def d_in(self) -> int:
        return self.fc1.d_in

    @property
    def d_out(self) -> int:
        return self.fc2.d_out

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.relu(self.fc1(x)))


def mlp2_forward(mlp: Mlp2, x: Tensor) -> Tensor:
    return mlp(x)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gamma, self.beta, self.eps)


def normalize_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free layer normalisation (unit gain, zero shift)."""
    d = x.shape[1]
    return nc.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)


class CrossAttentionLayer(Module):
    """Single-head scaled dot-product attention with a post-norm residual.

    ``out = LayerNorm(queries + softmax(Qp Kp^T / C) Vp W_out)`` with ``Qp = queries W_q``,
    ``Kp = keyvals W_k``, ``Vp = keyvals W_v`` and ``C = sqrt(d)`` unless given.
    """

    def __init__(self, d: int, rng: np.random.Generator, scale: float | None = None,
                 residual: bool = True, zero_out: bool = False):
        self.w_q = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.w_k = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.w_v = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        w_out = xavier_uniform(rng, d, d)
        # zero_out starts the layer as LayerNorm(queries): the attention branch is silent
        self.w_out = Tensor(np.zeros((d, d)) if zero_out else w_out, requires_grad=True)
        self.norm = LayerNorm(d)
        self.d = d
        self.scale = math.sqrt(d) if scale is None else float(scale)
        if self.scale <= 0:
            raise ValueError(f"attention scale must be positive, got {self.scale}")
        self.residual = residual

    def attention_weights(self, queries: Tensor, keyvals: Tensor) -> Tensor:
        q = nc.matmul(queries, self.w_q)
        k = nc.matmul(keyvals, self.w_k)
        return nc.softmax(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / self.scale))

    def mix(self, queries: Tensor, keyvals: Tensor) -> Tensor:
        """The attention branch before the residual add and normalisation."""
        self._check(queries, keyvals)
        attn = self.attention_weights(queries, keyvals)
        v = nc.matmul(keyvals, self.w_v)
        return nc.matmul(nc.matmul(attn, v), self.w_out)

    def __call__(self, queries: Tensor, keyvals: Tensor) -> Tensor:
        mixed = self.mix(queries, keyvals)
        if self.residual:
            mixed = nc.add(queries, mixed)
        return self.norm(mixed)

    def _check(self, queries: Tensor, keyvals: Tensor) -> None:
        if keyvals.data.ndim != 2 or keyvals.shape[0] == 0:
            raise EmptyContextError("cross-attention needs at least one key/value row")
        if queries.data.ndim != 2 or queries.shape[1] != self.d or keyvals.shape[1] != self.d:
            raise DimensionError(
                f"cross-attention width {self.d}: queries {queries.shape}, keyvals {keyvals.shape}")


def cross_attend(layer: CrossAttentionLayer, queries: Tensor, keyvals: Tensor) -> Tensor:
    return layer(queries, keyvals)


def wrap_angle(theta) -> np.ndarray:
    """Canonical angle in [-pi, pi), snapped to a 1e-9 rad grid.

    The snap makes ``theta`` and ``theta + 2*pi`` land on the same float, which plain
    modular reduction does not guarantee.
    """
    th = np.asarray(theta, dtype=np.float64)
    wrapped = np.round(np.mod(th + math.pi, 2 * math.pi) - math.pi, 9)
    return np.where(wrapped >= math.pi, wrapped - 2 * math.pi, wrapped)


class HeadingEmbedding(Module):
    """Lifts (sin theta, cos theta) to width ``d`` with a learned affine map."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(2, d, rng)

    def __call__(self, thetas) -> Tensor:
        th = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
        if not np.all(np.isfinite(th)):
            raise ValueError(f"heading angles must be finite, got {th.tolist()}")
        th = wrap_angle(th)
        return self.proj(Tensor(np.stack([np.sin(th), np.cos(th)], axis=1)))


def heading_embed(embedding: HeadingEmbedding, theta: float) -> Tensor:
    """Embedding of a single heading as a length-``d`` vector."""
    return nc.reshape(embedding([theta]), (embedding.proj.d_out,))
