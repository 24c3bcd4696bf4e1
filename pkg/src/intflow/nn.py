"""Neural building blocks for coupling backbones and prior conditioners.

Three dense-block flavors are supported, selected by ``variant``:

* ``"relu"``     Conv1x1 -> ReLU -> Conv3x3 -> ReLU (the plain baseline)
* ``"gn_swish"`` Conv1x1 -> GroupNorm -> Swish -> Conv3x3 -> GroupNorm -> Swish
* ``"toy"``      Conv1x1 -> LayerNorm -> ReLU -> Conv1x1 -> LayerNorm -> ReLU
  (all-1x1 so it also serves 1x1-pixel toy inputs)

Blocks are densely connected: each block's output is concatenated onto its
input.  Every layer exposes both ``forward`` (tape nodes, for training) and
``forward_value`` (plain numpy, for codec/eval paths); the two share the same
numeric kernels and therefore produce bit-identical values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import DimensionError, ParameterError

BLOCK_VARIANTS = ("toy", "relu", "gn_swish")

_NORM_EPS = 1e-5


def group_count(channels: int) -> int:
    """Group-normalization group count: prefer 3 groups, then 2, else 1."""
    if channels < 1:
        raise ParameterError(f"channels must be >= 1, got {channels}")
    if channels % 3 == 0:
        return 3
    if channels % 2 == 0:
        return 2
    return 1


class Conv2D:
    """Same-padding stride-1 convolution; kernel layout (kh, kw, Cin, Cout)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, name: str):
        if kernel_size not in (1, 3):
            raise ParameterError(f"kernel_size must be 1 or 3, got {kernel_size}")
        k = kernel_size
        self.kernel = Parameter(np.zeros((k, k, in_channels, out_channels)), f"{name}.kernel")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")
        self.in_channels = in_channels
        self.out_channels = out_channels

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def forward(self, x) -> Node:
        return ad.conv2d(x, self.kernel, self.bias)

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        return ad.conv2d_value(x, self.kernel.value, self.bias.value)


class LayerNorm:
    """Normalize over the channel axis per position."""

    def __init__(self, channels: int, name: str):
        self.gain = Parameter(np.ones(channels), f"{name}.gain")
        self.bias = Parameter(np.zeros(channels), f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def forward(self, x) -> Node:
        return ad.layer_norm(x, self.gain, self.bias, _NORM_EPS)

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        return ad.layer_norm_value(x, self.gain.value, self.bias.value, _NORM_EPS)


class GroupNorm:
    """Normalize over (H, W, channels-within-group) per sample."""

    def __init__(self, channels: int, name: str, groups: int | None = None):
        self.groups = group_count(channels) if groups is None else groups
        if channels % self.groups:
            raise DimensionError(f"groups {self.groups} does not divide channels {channels}")
        self.gain = Parameter(np.ones(channels), f"{name}.gain")
        self.bias = Parameter(np.zeros(channels), f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def forward(self, x) -> Node:
        return ad.group_norm(x, self.gain, self.bias, self.groups, _NORM_EPS)

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        return ad.group_norm_value(x, self.gain.value, self.bias.value, self.groups, _NORM_EPS)


class DenseBlock:
    """Two convolutions (with optional normalizers) whose output is concatenated to the input."""

    def __init__(self, variant: str, in_channels: int, channels: int, name: str):
        if variant not in BLOCK_VARIANTS:
            raise ParameterError(f"unknown block variant {variant!r}")
        self.variant = variant
        second_kernel = 1 if variant == "toy" else 3
        self.conv1 = Conv2D(in_channels, channels, 1, f"{name}.conv1")
        self.conv2 = Conv2D(channels, channels, second_kernel, f"{name}.conv2")
        if variant == "toy":
            self.norm1 = LayerNorm(channels, f"{name}.norm1")
            self.norm2 = LayerNorm(channels, f"{name}.norm2")
        elif variant == "gn_swish":
            self.norm1 = GroupNorm(channels, f"{name}.norm1")
            self.norm2 = GroupNorm(channels, f"{name}.norm2")
        else:
            self.norm1 = self.norm2 = None
        self.out_channels = in_channels + channels

    def parameters(self) -> list[Parameter]:
        params = self.conv1.parameters() + self.conv2.parameters()
        if self.norm1 is not None:
            params += self.norm1.parameters() + self.norm2.parameters()
        return params

    def _act(self, h, tape: bool):
        if self.variant == "gn_swish":
            return ad.swish(h) if tape else h * ad.sigmoid_value(h)
        return ad.relu(h) if tape else np.maximum(h, 0.0)

    def forward(self, x) -> Node:
        h = self.conv1.forward(x)
        if self.norm1 is not None:
            h = self.norm1.forward(h)
        h = self._act(h, tape=True)
        h = self.conv2.forward(h)
        if self.norm2 is not None:
            h = self.norm2.forward(h)
        h = self._act(h, tape=True)
        return ad.concat([x, h])

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        h = self.conv1.forward_value(x)
        if self.norm1 is not None:
            h = self.norm1.forward_value(h)
        h = self._act(h, tape=False)
        h = self.conv2.forward_value(h)
        if self.norm2 is not None:
            h = self.norm2.forward_value(h)
        h = self._act(h, tape=False)
        return np.concatenate([x, h], axis=-1)


class DenseNet:
    """Densely connected block stack with a 1x1 output projection."""

    def __init__(self, variant: str, in_channels: int, out_channels: int, depth: int, channels: int, name: str):
        self.blocks: list[DenseBlock] = []
        ch = in_channels
        for i in range(depth):
            block = DenseBlock(variant, ch, channels, f"{name}.block{i}")
            self.blocks.append(block)
            ch = block.out_channels
        self.proj = Conv2D(ch, out_channels, 1, f"{name}.proj")
        self.in_channels = in_channels
        self.out_channels = out_channels

    def parameters(self) -> list[Parameter]:
        params = []
        for b in self.blocks:
            params += b.parameters()
        return params + self.proj.parameters()

    def forward(self, x) -> Node:
        h = x
        for b in self.blocks:
            h = b.forward(h)
        return self.proj.forward(h)

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        h = x
        for b in self.blocks:
            h = b.forward_value(h)
        return self.proj.forward_value(h)


class ConvNetStack:
    """Plain alternating Conv3x3 + ReLU stack with a 1x1 output projection."""

    def __init__(self, in_channels: int, out_channels: int, depth: int, channels: int, name: str):
        self.convs: list[Conv2D] = []
        ch = in_channels
        for i in range(depth):
            self.convs.append(Conv2D(ch, channels, 3, f"{name}.conv{i}"))
            ch = channels
        self.proj = Conv2D(ch, out_channels, 1, f"{name}.proj")
        self.in_channels = in_channels
        self.out_channels = out_channels

    def parameters(self) -> list[Parameter]:
        params = []
        for c in self.convs:
            params += c.parameters()
        return params + self.proj.parameters()

    def forward(self, x) -> Node:
        h = x
        for c in self.convs:
            h = ad.relu(c.forward(h))
        return self.proj.forward(h)

    def forward_value(self, x: np.ndarray) -> np.ndarray:
        h = x
        for c in self.convs:
            h = np.maximum(c.forward_value(h), 0.0)
        return self.proj.forward_value(h)


def init_parameters(net, seed: int) -> list[Parameter]:
    """Fill a network's parameters in place, deterministically from ``seed``.

    Conv kernels get fan-in-scaled uniform values (variance 2/fan_in), biases
    zero, normalizer gains one.  Classified by name suffix, so any object with
    a ``parameters()`` method works.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = net.parameters()
    for p in params:
        if p.name.endswith(".kernel"):
            kh, kw, cin, _ = p.value.shape
            bound = np.sqrt(6.0 / (kh * kw * cin))
            p.value[...] = rng.uniform(-bound, bound, size=p.value.shape)
        elif p.name.endswith(".gain"):
            p.value[...] = 1.0
        else:
            p.value[...] = 0.0
    return params
