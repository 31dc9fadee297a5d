"""lipschitz.py :: Lipschitz-continuous transformer components.

CenterNorm replaces variance normalisation with mean removal, scaled cosine
similarity attention (SCSA) works on length-normalised query/key/value rows,
and weighted residual shortcuts scale each branch by a learnable `alpha`
before stochastic depth. `lipschitz_block` composes them post-norm:

    y   = CN1(x + DropPath(alpha1 * SCSA(x)))
    out = CN2(y + DropPath(alpha2 * MLP(y)))
"""

from __future__ import annotations

import math
import typing as t
from dataclasses import dataclass

import numpy as np

from lipfast import tensor as T
from lipfast.errors import ConfigError, DimensionError, UsageError
from lipfast.layers import Module
from lipfast.layers.basic import Linear, trunc_normal
from lipfast.tensor import Parameter, Tensor

DEFAULT_ALPHA = 0.1
DEFAULT_EPS = 1e-6
DEFAULT_NU = 1.0
DEFAULT_TAU = 5.0


class CenterNorm(Module):
    """Learnable affine map of the mean-removed input."""

    def __init__(self, dim: int, *, dtype: t.Any = None) -> None:
        """Initialize CenterNorm with `gamma = 1` and `beta = 0`.

        Raises:
            ConfigError: if `dim < 2`, where `D / (D - 1)` is undefined

        """
        if dim < 2:
            raise ConfigError(f"CenterNorm needs dim >= 2, got {dim}")
        dtype = T.resolve_dtype(dtype)
        self.dim = dim
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        """Return `center_norm(x, self)`."""
        return center_norm(x, self)


def center_norm(x: Tensor, p: CenterNorm) -> Tensor:
    """`gamma * D/(D-1) * (x - mean(x)) + beta` over the last axis."""
    if p.dim < 2:
        raise ConfigError(f"CenterNorm needs dim >= 2, got {p.dim}")
    if x.shape[-1:] != (p.dim,):
        raise DimensionError(
            f"CenterNorm over {p.dim} features got input {x.shape}"
        )
    centered = x - x.mean(axis=-1, keepdims=True)
    return p.gamma * T.scale(centered, p.dim / (p.dim - 1)) + p.beta


class ScaledCosineAttention(Module):
    """Multi-head SCSA parameters.

    `tau` is learned per head as `exp(log_tau)`; `nu` is fixed and bounds the
    norm of every output row.
    """

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        *,
        heads: int = 4,
        nu: float = DEFAULT_NU,
        tau: float = DEFAULT_TAU,
        eps: float = DEFAULT_EPS,
        dtype: t.Any = None,
    ) -> None:
        """Initialize SCSA with truncated-normal projections."""
        problems = []
        if heads < 1 or dim % heads:
            problems.append(f"heads={heads} must divide dim={dim}")
        if nu <= 0:
            problems.append(f"nu={nu} must be positive")
        if tau <= 0:
            problems.append(f"tau={tau} must be positive")
        if eps <= 0:
            problems.append(f"eps={eps} must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        dtype = T.resolve_dtype(dtype)
        self.dim = dim
        self.heads = heads
        self.nu = nu
        self.eps = eps
        self.wq = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wk = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wv = Parameter(trunc_normal(rng, (dim, dim), dtype=dtype))
        self.log_tau = Parameter(np.full(heads, math.log(tau), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        """Return `scsa(x, self)`."""
        return scsa(x, self)


@dataclass(frozen=True)
class AttentionTrace:
    """Intermediate tensors of one attention evaluation.

    `queries`, `keys` and `values` are `(..., heads, N, D / heads)`,
    `attention` is `(..., heads, N, N)` and `output` is `(..., N, D)`.
    """

    queries: Tensor
    keys: Tensor
    values: Tensor
    attention: Tensor
    output: Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """Reshape `(..., N, D)` into `(..., heads, N, D / heads)`."""
    lead, (n, d) = x.shape[:-2], x.shape[-2:]
    y = T.reshape(x, lead + (n, heads, d // heads))
    k = len(lead)
    return T.transpose(y, list(range(k)) + [k + 1, k, k + 2])


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of `split_heads`."""
    lead, (h, n, dh) = x.shape[:-3], x.shape[-3:]
    k = len(lead)
    y = T.transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return T.reshape(y, lead + (n, h * dh))


def unit_rows(x: Tensor, eps: float) -> Tensor:
    """Divide each last-axis row by `sqrt(||row||^2 + eps)`."""
    return x / T.sqrt(T.sum_(x * x, axis=-1, keepdims=True), eps)


def scsa_trace(x: Tensor, p: ScaledCosineAttention) -> AttentionTrace:
    """Evaluate SCSA and keep the intermediate tensors."""
    if x.ndim < 2 or x.shape[-1] != p.dim:
        raise DimensionError(f"SCSA over {p.dim} features got {x.shape}")
    q = unit_rows(split_heads(x @ p.wq, p.heads), p.eps)
    k = unit_rows(split_heads(x @ p.wk, p.heads), p.eps)
    v = unit_rows(split_heads(x @ p.wv, p.heads), p.eps)
    tau = T.reshape(T.exp(p.log_tau), (p.heads, 1, 1))
    attention = T.softmax(tau * (q @ T.swap_last(k)))
    # nu / sqrt(heads) per head keeps the concatenated row inside the nu-ball
    heads_out = T.scale(attention @ v, p.nu / math.sqrt(p.heads))
    return AttentionTrace(q, k, v, attention, merge_heads(heads_out))


def scsa(x: Tensor, p: ScaledCosineAttention) -> Tensor:
    """Scaled cosine similarity attention over the token axis.

    Each head output is scaled by `nu / sqrt(heads)` rather than `nu`, so
    a single token returns its unit value rows times `nu / sqrt(heads)` and
    the concatenated row stays inside the `nu`-ball.

    Args:
        x: Tokens `(..., N, D)`
        p: Attention parameters

    Returns:
        `(..., N, D)`; every row has norm at most `p.nu`

    """
    return scsa_trace(x, p).output


def drop_path(
    branch: Tensor,
    prob: float,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    """Stochastic depth per sample along the leading axis.

    Kept samples are rescaled by `1 / (1 - prob)`. Eval mode, and training
    with `prob == 0`, never touch `rng`.
    """
    if not training or prob == 0.0:
        return branch
    if rng is None:
        raise UsageError("training-mode DropPath needs a seeded rng")
    keep = 1.0 - prob
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
    mask = (rng.random(shape) < keep).astype(branch.dtype) / keep
    return branch * Tensor(mask)


def _check_drop_prob(prob: float) -> None:
    if not 0.0 <= prob < 1.0:
        raise ConfigError(f"drop path probability {prob} not in [0, 1)")


class WeightedResidual(Module):
    """Residual shortcut with a learnable per-feature branch weight."""

    def __init__(
        self,
        dim: int,
        *,
        alpha: float = DEFAULT_ALPHA,
        drop_prob: float = 0.0,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the shortcut with `alpha` everywhere."""
        _check_drop_prob(drop_prob)
        self.dim = dim
        self.drop_prob = drop_prob
        self.alpha = Parameter(
            np.full(dim, alpha, dtype=T.resolve_dtype(dtype))
        )

    def forward(
        self,
        x: Tensor,
        f_out: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Return `weighted_residual(x, f_out, self, training, rng)`."""
        return weighted_residual(x, f_out, self, training, rng)


def weighted_residual(
    x: Tensor,
    f_out: Tensor,
    p: WeightedResidual,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """`x + DropPath(alpha * f_out)`."""
    if x.shape != f_out.shape:
        raise DimensionError(
            f"residual shapes differ: {x.shape} vs {f_out.shape}"
        )
    return x + drop_path(p.alpha * f_out, p.drop_prob, training, rng)


class Mlp(Module):
    """Two-layer feed-forward network `D -> ratio * D -> D` with SiLU."""

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        *,
        ratio: int = 2,
        dtype: t.Any = None,
    ) -> None:
        """Initialize both linear layers."""
        self.fc1 = Linear(dim, ratio * dim, rng, dtype=dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        """Apply the network to the last axis."""
        return self.fc2(T.silu(self.fc1(x)))


class LipschitzBlock(Module):
    """Attention and MLP sub-blocks, each wrapped in WRS and CenterNorm."""

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        *,
        heads: int = 4,
        mlp_ratio: int = 2,
        drop_prob: float = 0.0,
        alpha: float = DEFAULT_ALPHA,
        nu: float = DEFAULT_NU,
        tau: float = DEFAULT_TAU,
        eps: float = DEFAULT_EPS,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the block."""
        self.dim = dim
        self.attention = ScaledCosineAttention(
            dim, rng, heads=heads, nu=nu, tau=tau, eps=eps, dtype=dtype
        )
        self.residual1 = WeightedResidual(
            dim, alpha=alpha, drop_prob=drop_prob, dtype=dtype
        )
        self.norm1 = CenterNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, rng, ratio=mlp_ratio, dtype=dtype)
        self.residual2 = WeightedResidual(
            dim, alpha=alpha, drop_prob=drop_prob, dtype=dtype
        )
        self.norm2 = CenterNorm(dim, dtype=dtype)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Return `lipschitz_block(x, self, training, rng)`."""
        return lipschitz_block(x, self, training, rng)


def lipschitz_block(
    x: Tensor,
    p: LipschitzBlock,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-norm transformer block over `(..., N, D)` tokens."""
    y = p.norm1(p.residual1(x, p.attention(x), training, rng))
    return p.norm2(p.residual2(y, p.mlp(y), training, rng))
