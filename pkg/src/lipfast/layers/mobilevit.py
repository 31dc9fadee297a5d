"""mobilevit.py :: Convolutional stages and the patch-transformer block.

`inverted_residual` is the MobileNetV2 expand/depthwise/project block.
`fast_block` lifts a feature map with a local conv, rearranges it into
`(P, N, d)` with `unfold`, runs one transformer stack across the N patches for
every intra-patch position, folds back and fuses with its input through a
point-wise convolution.
"""

from __future__ import annotations

import typing as t

import numpy as np

from lipfast import tensor as T
from lipfast.errors import ConfigError, DimensionError
from lipfast.layers import Module
from lipfast.layers.baseline import BaselineBlock
from lipfast.layers.basic import Conv2d, DepthwiseConv2d
from lipfast.layers.lipschitz import LipschitzBlock
from lipfast.tensor import Tensor

VARIANTS = ("lips", "base")


class InvertedResidual(Module):
    """MobileNetV2 block parameters."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        expansion: int = 4,
        kernel: int = 3,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the three convolutions."""
        if stride not in (1, 2):
            raise ConfigError(
                f"inverted residual stride {stride} not in (1, 2)"
            )
        hidden = in_channels * expansion
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.expansion = expansion
        self.use_residual = stride == 1 and in_channels == out_channels
        self.expand = Conv2d(in_channels, hidden, 1, rng, dtype=dtype)
        self.depthwise = DepthwiseConv2d(
            hidden, kernel, rng, stride=stride, dtype=dtype
        )
        self.project = Conv2d(hidden, out_channels, 1, rng, dtype=dtype)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Return `inverted_residual(x, self)`."""
        return inverted_residual(x, self)


def inverted_residual(x: Tensor, p: InvertedResidual) -> Tensor:
    """Expand, depthwise conv (strided), project; add `x` when shapes allow."""
    if x.shape[-1] != p.in_channels:
        raise DimensionError(
            f"inverted residual expects {p.in_channels} channels, got "
            f"{x.shape}"
        )
    hidden = T.silu(p.expand(x))
    hidden = T.silu(p.depthwise(hidden))
    out = p.project(hidden)
    return x + out if p.use_residual else out


def unfold(x: Tensor, patch: tuple[int, int]) -> Tensor:
    """Rearrange `(..., H, W, d)` into `(..., P, N, d)`.

    Args:
        x: Feature map
        patch: Patch `(w, h)`; `h` must divide `H` and `w` must divide `W`

    Returns:
        Element `(p, n)` is intra-patch pixel `p` of patch `n`, both counted
        row-major; `P = w * h` and `N = H * W / P`.

    """
    pw, ph = patch
    if x.ndim < 3:
        raise DimensionError(f"unfold expects (..., H, W, d), got {x.shape}")
    lead, (height, width, dim) = x.shape[:-3], x.shape[-3:]
    if pw < 1 or ph < 1 or height % ph or width % pw:
        raise DimensionError(
            f"patch (w={pw}, h={ph}) does not tile a {height}x{width} map"
        )
    k = len(lead)
    grid = T.reshape(x, lead + (height // ph, ph, width // pw, pw, dim))
    grid = T.transpose(grid, list(range(k)) + [k + 1, k + 3, k, k + 2, k + 4])
    return T.reshape(
        grid, lead + (ph * pw, (height // ph) * (width // pw), dim)
    )


def fold(
    xu: Tensor, patch: tuple[int, int], out_shape: tuple[int, int]
) -> Tensor:
    """Inverse of `unfold`: `(..., P, N, d)` back to `(..., H, W, d)`."""
    pw, ph = patch
    height, width = out_shape
    if xu.ndim < 3:
        raise DimensionError(f"fold expects (..., P, N, d), got {xu.shape}")
    lead, (pixels, count, dim) = xu.shape[:-3], xu.shape[-3:]
    if (
        pw < 1
        or ph < 1
        or pixels != pw * ph
        or height % ph
        or width % pw
        or count != (height // ph) * (width // pw)
    ):
        raise DimensionError(
            f"cannot fold {xu.shape} with patch (w={pw}, h={ph}) into "
            f"{height}x{width}"
        )
    k = len(lead)
    grid = T.reshape(xu, lead + (ph, pw, height // ph, width // pw, dim))
    grid = T.transpose(grid, list(range(k)) + [k + 2, k, k + 3, k + 1, k + 4])
    return T.reshape(grid, lead + (height, width, dim))


def transformer_block(
    variant: str,
    dim: int,
    rng: np.random.Generator,
    *,
    heads: int,
    mlp_ratio: int,
    drop_prob: float,
    dtype: t.Any = None,
) -> Module:
    """Build one transformer block of the requested variant."""
    if variant == "lips":
        return LipschitzBlock(
            dim,
            rng,
            heads=heads,
            mlp_ratio=mlp_ratio,
            drop_prob=drop_prob,
            dtype=dtype,
        )
    if variant == "base":
        return BaselineBlock(
            dim,
            rng,
            heads=heads,
            mlp_ratio=mlp_ratio,
            drop_prob=drop_prob,
            dtype=dtype,
        )
    raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")


class FastBlock(Module):
    """Local conv, patch transformer stack, projection and fusion."""

    def __init__(
        self,
        channels: int,
        hidden_dim: int,
        depth: int,
        rng: np.random.Generator,
        *,
        patch_size: tuple[int, int] = (2, 2),
        kernel: int = 3,
        heads: int = 4,
        mlp_ratio: int = 2,
        drop_probs: t.Sequence[float] | None = None,
        variant: str = "lips",
        out_channels: int | None = None,
        dtype: t.Any = None,
    ) -> None:
        """Initialize the block.

        Args:
            channels: Channels `C` of the incoming feature map
            hidden_dim: Transformer width `d`
            depth: Number of transformer blocks
            rng: Initialisation stream
            patch_size: Patch `(w, h)`
            kernel: Local conv kernel size
            heads: Attention heads per transformer block
            mlp_ratio: MLP expansion ratio
            drop_probs: DropPath rate of each transformer block
            variant: `"lips"` or `"base"`
            out_channels: Channels after fusion, defaults to `channels`
            dtype: Parameter dtype

        """
        drop_probs = list(drop_probs) if drop_probs else [0.0] * depth
        if len(drop_probs) != depth:
            raise ConfigError(
                f"{len(drop_probs)} drop path rates for depth {depth}"
            )
        self.channels = channels
        self.hidden_dim = hidden_dim
        self.out_channels = out_channels or channels
        self.patch_size = tuple(patch_size)
        self.local_conv = Conv2d(channels, channels, kernel, rng, dtype=dtype)
        self.local_pointwise = Conv2d(
            channels, hidden_dim, 1, rng, dtype=dtype
        )
        self.transformer_blocks = [
            transformer_block(
                variant,
                hidden_dim,
                rng,
                heads=heads,
                mlp_ratio=mlp_ratio,
                drop_prob=prob,
                dtype=dtype,
            )
            for prob in drop_probs
        ]
        self.project_pointwise = Conv2d(
            hidden_dim, channels, 1, rng, dtype=dtype
        )
        self.fusion_pointwise = Conv2d(
            2 * channels, self.out_channels, 1, rng, dtype=dtype
        )

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Return `fast_block(x, self, training, rng)`."""
        return fast_block(x, self, training, rng)


def fast_block(
    x: Tensor,
    p: FastBlock,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mix local and global context over a `(B, H, W, C)` feature map.

    Extents that are not patch multiples are zero-padded before `unfold` and
    cropped after `fold`. An unbatched `(H, W, C)` input is treated as a batch
    of one.
    """
    if x.ndim == 3:
        out = fast_block(T.reshape(x, (1,) + x.shape), p, training, rng)
        return T.reshape(out, out.shape[1:])
    if x.ndim != 4 or x.shape[-1] != p.channels:
        raise DimensionError(
            f"FAST block expects (B, H, W, {p.channels}), got {x.shape}"
        )
    _, height, width, _ = x.shape
    pw, ph = p.patch_size
    pad_h, pad_w = -height % ph, -width % pw

    local = p.local_pointwise(T.silu(p.local_conv(x)))
    if pad_h or pad_w:
        local = T.pad(local, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    tokens = unfold(local, (pw, ph))
    for block in p.transformer_blocks:
        tokens = block(tokens, training, rng)
    folded = fold(tokens, (pw, ph), (height + pad_h, width + pad_w))
    if pad_h or pad_w:
        crop = (slice(None), slice(0, height), slice(0, width))
        folded = T.take(folded, crop)

    projected = T.silu(p.project_pointwise(folded))
    return T.silu(p.fusion_pointwise(T.concat([x, projected], axis=-1)))
