"""Layers shared by the encoder, prompt re-calibration, and refinement stages.

Every layer owns named Parameters (dotted paths, unique per model) and
exposes parameters() in a deterministic order, which fixes the optimizer
and checkpoint layouts.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Parameter, Tensor, add, concat, gelu, layer_norm, matmul, mul, reshape,
    softmax_lastdim, swapaxes, transpose,
)

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def expand_rows(token: Tensor, batch: int) -> Tensor:
    """Broadcast a (1, T, d) learned token block to (batch, T, d), differentiably."""
    ones = Tensor(np.ones((batch, 1, 1), dtype=token.dtype))
    return mul(ones, token)


class Linear:
    # Weights are fan-in scaled rather than flat 0.02: at desk widths (d=64)
    # the flat convention sits ~6x below unit gain, attenuating signal through
    # every projection and stalling from-scratch training. Tokens and prompts
    # keep INIT_STD.
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32, with_bias: bool = True):
        self.weight = Parameter(
            f"{name}.weight", trunc_normal(rng, (d_in, d_out), std=1.0 / math.sqrt(d_in)), dtype=dtype
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out), dtype=dtype) if with_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight.tensor)
        return add(out, self.bias.tensor) if self.bias is not None else out

    def zero_(self) -> None:
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, dim: int, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim), dtype=dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma.tensor, self.beta.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class MultiHeadAttention:
    """Scaled dot-product attention over the last two axes (tokens, features).

    Queries may come from a different sequence than keys/values, which covers
    both self- and cross-attention. Setting capture_attention stashes the most
    recent post-softmax weights (detached) for inspection.
    """

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        if dim % heads != 0:
            raise ConfigurationError(f"{name}: dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(f"{name}.wq", dim, dim, rng, dtype)
        # a key bias shifts every score of a query equally; softmax ignores it,
        # so it would be a parameter with an identically zero gradient
        self.wk = Linear(f"{name}.wk", dim, dim, rng, dtype, with_bias=False)
        self.wv = Linear(f"{name}.wv", dim, dim, rng, dtype)
        self.wo = Linear(f"{name}.wo", dim, dim, rng, dtype)
        self.capture_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return transpose(reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        if queries.shape[-1] != keys_values.shape[-1]:
            raise DimensionError(
                f"attention feature dims disagree: {queries.shape} vs {keys_values.shape}")
        b, tq, d = queries.shape
        q = self._split_heads(self.wq(queries))
        k = self._split_heads(self.wk(keys_values))
        v = self._split_heads(self.wv(keys_values))
        scores = mul(matmul(q, swapaxes(k, -1, -2)),
                     Tensor(np.asarray(1.0 / math.sqrt(self.head_dim), dtype=queries.dtype)))
        attn = softmax_lastdim(scores)
        if self.capture_attention:
            self.last_attention = attn.data.copy()
        out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
        return self.wo(out)

    def parameters(self) -> list[Parameter]:
        return [*self.wq.parameters(), *self.wk.parameters(),
                *self.wv.parameters(), *self.wo.parameters()]


class FeedForward:
    def __init__(self, name: str, dim: int, mult: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.fc1 = Linear(f"{name}.fc1", dim, dim * mult, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", dim * mult, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def parameters(self) -> list[Parameter]:
        return [*self.fc1.parameters(), *self.fc2.parameters()]


def collect_parameters(layers: Sequence) -> list[Parameter]:
    params: list[Parameter] = []
    for layer in layers:
        params.extend(layer.parameters())
    return params
