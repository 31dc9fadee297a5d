"""baseline.py :: Conventional transformer block for the stability ablation.

Swaps each Lipschitz component for its usual counterpart: LayerNorm for
CenterNorm, `softmax(QK^T / sqrt(d)) V` for SCSA and a plain residual for the
weighted shortcut. The block layout (post-norm, DropPath, MLP, no output
projection) is identical, so the two variants differ only in those parts.
"""

from __future__ import annotations

import math
import typing as t

import numpy as np

from lipfast import tensor as T
from lipfast.errors import ConfigError, DimensionError
from lipfast.layers import Module
from lipfast.layers.basic import trunc_normal
from lipfast.layers.lipschitz import (
    AttentionTrace,
    Mlp,
    drop_path,
    merge_heads,
    split_heads,
)
from lipfast.tensor import Parameter, Tensor

LAYER_NORM_EPS = 1e-5


class LayerNorm(Module):
    """Variance normalisation over the last axis with a learnable affine."""

    def __init__(self, dim: int, *, dtype: t.Any = None) -> None:
        """Initialize LayerNorm with `gamma = 1` and `beta = 0`."""
        dtype = T.resolve_dtype(dtype)
        self.dim = dim
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        """Normalise `x` to zero mean and unit variance per row."""
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        return self.gamma * (centered / T.sqrt(variance, LAYER_NORM_EPS)) + (
            self.beta
        )


class DotProductAttention(Module):
    """Multi-head scaled dot-product attention without output projection."""

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        *,
        heads: int = 4,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the projections."""
        if heads < 1 or dim % heads:
            raise ConfigError(f"heads={heads} must divide dim={dim}")
        dtype = T.resolve_dtype(dtype)
        self.dim = dim
        self.heads = heads
        self.wq = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wk = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wv = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))

    def trace(self, x: Tensor) -> AttentionTrace:
        """Evaluate attention and keep the intermediate tensors."""
        if x.ndim < 2 or x.shape[-1] != self.dim:
            raise DimensionError(
                f"attention over {self.dim} features got {x.shape}"
            )
        q = split_heads(x @ self.wq, self.heads)
        k = split_heads(x @ self.wk, self.heads)
        v = split_heads(x @ self.wv, self.heads)
        scores = T.scale(
            q @ T.swap_last(k), 1.0 / math.sqrt(self.dim // self.heads)
        )
        attention = T.softmax(scores)
        return AttentionTrace(q, k, v, attention, merge_heads(attention @ v))

    def forward(self, x: Tensor) -> Tensor:
        """Attend over the token axis of `(..., N, D)`."""
        return self.trace(x).output


class Residual(Module):
    """Plain `x + DropPath(f_out)` shortcut."""

    def __init__(self, *, drop_prob: float = 0.0) -> None:
        """Initialize the shortcut."""
        if not 0.0 <= drop_prob < 1.0:
            raise ConfigError(
                f"drop path probability {drop_prob} not in [0, 1)"
            )
        self.drop_prob = drop_prob

    def forward(
        self,
        x: Tensor,
        f_out: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Add the (possibly dropped) branch to `x`."""
        if x.shape != f_out.shape:
            raise DimensionError(
                f"residual shapes differ: {x.shape} vs {f_out.shape}"
            )
        return x + drop_path(f_out, self.drop_prob, training, rng)


class BaselineBlock(Module):
    """Post-norm block built from LayerNorm, dot-product attention, MLP."""

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        *,
        heads: int = 4,
        mlp_ratio: int = 2,
        drop_prob: float = 0.0,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the block."""
        self.dim = dim
        self.attention = DotProductAttention(
            dim, rng, heads=heads, dtype=dtype
        )
        self.residual1 = Residual(drop_prob=drop_prob)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, rng, ratio=mlp_ratio, dtype=dtype)
        self.residual2 = Residual(drop_prob=drop_prob)
        self.norm2 = LayerNorm(dim, dtype=dtype)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run both sub-blocks over `(..., N, D)` tokens."""
        y = self.norm1(self.residual1(x, self.attention(x), training, rng))
        return self.norm2(self.residual2(y, self.mlp(y), training, rng))
