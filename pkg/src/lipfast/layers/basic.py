"""basic.py :: Linear and convolutional layers plus weight initialisers."""

from __future__ import annotations

import typing as t

import numpy as np
from scipy import stats

from lipfast import tensor as T
from lipfast.layers import Module
from lipfast.tensor import Parameter, Tensor


def trunc_normal(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    std: float = 0.02,
    dtype: t.Any = None,
) -> np.ndarray:
    """Draw from a normal truncated at two standard deviations."""
    values = stats.truncnorm.rvs(
        -2.0, 2.0, scale=std, size=shape, random_state=rng
    )
    return np.asarray(values, dtype=T.resolve_dtype(dtype))


def kaiming_uniform(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int,
    dtype: t.Any = None,
) -> np.ndarray:
    """Draw from `U(-b, b)` with `b = sqrt(6 / fan_in)`."""
    bound = np.sqrt(6.0 / fan_in)
    values = rng.uniform(-bound, bound, size=shape)
    return np.asarray(values, dtype=T.resolve_dtype(dtype))


def _zeros(shape: tuple[int, ...], dtype: t.Any) -> np.ndarray:
    return np.zeros(shape, dtype=T.resolve_dtype(dtype))


class Linear(Module):
    """Affine map over the last axis, `x @ weight + bias`."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        dtype: t.Any = None,
    ) -> None:
        """Initialize a Linear layer with truncated-normal weights."""
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            trunc_normal(rng, (in_features, out_features), dtype=dtype)
        )
        self.bias = (
            Parameter(_zeros((out_features,), dtype)) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        """Apply the affine map."""
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """Dense 2-D convolution with a square kernel and `same`-style padding."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        bias: bool = True,
        dtype: t.Any = None,
    ) -> None:
        """Initialize a Conv2d layer with Kaiming-uniform weights."""
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        shape = (kernel, kernel, in_channels, out_channels)
        self.weight = Parameter(
            kaiming_uniform(
                rng, shape, kernel * kernel * in_channels, dtype=dtype
            )
        )
        self.bias = (
            Parameter(_zeros((out_channels,), dtype)) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        """Convolve `x` (channels-last)."""
        out = T.conv2d(x, self.weight, self.stride, self.padding)
        return out + self.bias if self.bias is not None else out


class DepthwiseConv2d(Module):
    """Per-channel 2-D convolution."""

    def __init__(
        self,
        channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        bias: bool = True,
        dtype: t.Any = None,
    ) -> None:
        """Initialize a DepthwiseConv2d layer with Kaiming-uniform weights."""
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Parameter(
            kaiming_uniform(
                rng, (kernel, kernel, channels), kernel * kernel, dtype=dtype
            )
        )
        self.bias = Parameter(_zeros((channels,), dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        """Convolve each channel of `x` with its own kernel."""
        out = T.depthwise_conv2d(x, self.weight, self.stride, self.padding)
        return out + self.bias if self.bias is not None else out
