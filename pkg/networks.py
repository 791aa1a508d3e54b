"""Building blocks shared by the world model and the actor-critic."""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator

import torch
from torch import Tensor, nn


def torch_bn_momentum(decay: float) -> float:
    # config keeps the running-stat decay; torch wants the weight of the new batch
    return 1.0 - decay


def make_norm(kind: str, features: int, bn_momentum: float = 0.9) -> nn.Module:
    if kind == "layer":
        return nn.LayerNorm(features)
    if kind == "batch":
        return nn.BatchNorm1d(features, momentum=torch_bn_momentum(bn_momentum))
    raise ValueError(f"unknown normalization: {kind}")


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def conv_stages(image_size: int) -> int:
    stages = int(math.log2(image_size)) - 2
    if image_size != 2 ** (stages + 2) or stages < 1:
        raise ValueError(f"image_size must be a power of two >= 8, got {image_size}")
    return stages


class ConvEncoder(nn.Module):
    """Strided conv stack (kernel 4, stride 2, padding 1) down to a 4x4 map."""

    def __init__(self, image_size: int = 64, depth: int = 32):
        super().__init__()
        self.image_size = image_size
        stages = conv_stages(image_size)
        layers: list[nn.Module] = []
        in_channels = 3
        for stage in range(stages):
            out_channels = depth * 2**stage
            layers += [
                nn.Conv2d(in_channels, out_channels, 4, 2, 1, bias=False),
                ChannelLayerNorm(out_channels),
                nn.SiLU(),
            ]
            in_channels = out_channels
        self.net = nn.Sequential(*layers, nn.Flatten())
        self.out_channels = in_channels
        self.out_features = in_channels * 4 * 4

    def forward(self, obs: Tensor) -> Tensor:
        expected = (3, self.image_size, self.image_size)
        if tuple(obs.shape[-3:]) != expected:
            raise ValueError(f"expected image shape {expected}, got {tuple(obs.shape[-3:])}")
        batch_shape = obs.shape[:-3]
        x = self.net(obs.reshape(-1, *expected))
        return x.reshape(*batch_shape, self.out_features)


class ConvDecoder(nn.Module):
    """Mirror of :class:`ConvEncoder` built from transposed convolutions."""

    def __init__(self, in_features: int, image_size: int = 64, depth: int = 32):
        super().__init__()
        self.image_size = image_size
        stages = conv_stages(image_size)
        channels = depth * 2 ** (stages - 1)
        self.linear = nn.Linear(in_features, channels * 4 * 4)
        self.start_shape = (channels, 4, 4)
        layers: list[nn.Module] = []
        for stage in reversed(range(stages)):
            if stage == 0:
                layers.append(nn.ConvTranspose2d(channels, 3, 4, 2, 1))
                break
            out_channels = depth * 2 ** (stage - 1)
            layers += [
                nn.ConvTranspose2d(channels, out_channels, 4, 2, 1, bias=False),
                ChannelLayerNorm(out_channels),
                nn.SiLU(),
            ]
            channels = out_channels
        self.net = nn.Sequential(*layers)

    def forward(self, features: Tensor) -> Tensor:
        batch_shape = features.shape[:-1]
        x = self.linear(features.reshape(-1, features.shape[-1]))
        x = self.net(x.reshape(-1, *self.start_shape))
        return x.reshape(*batch_shape, 3, self.image_size, self.image_size)


class MLP(nn.Module):
    """Linear + norm + SiLU hidden layers followed by a linear output layer.

    ``layers`` counts every linear layer, the output layer included.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        layers: int = 3,
        hidden: int = 512,
        norm: str = "layer",
        bn_momentum: float = 0.9,
        zero_output: bool = False,
    ):
        super().__init__()
        if layers < 1:
            raise ValueError(f"an MLP needs at least one layer, got {layers}")
        blocks: list[nn.Module] = []
        width = in_features
        for _ in range(layers - 1):
            blocks += [nn.Linear(width, hidden), make_norm(norm, hidden, bn_momentum), nn.SiLU()]
            width = hidden
        self.body = nn.Sequential(*blocks)
        self.out = nn.Linear(width, out_features)
        if zero_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor) -> Tensor:
        batch_shape = x.shape[:-1]
        x = self.body(x.reshape(-1, x.shape[-1]))
        return self.out(x).reshape(*batch_shape, -1)


class GRUCell(nn.Module):
    """Gated recurrent unit with a layer-normed joint projection.

    ``h = u * candidate + (1 - u) * h_prev``; ``update_bias`` shifts the
    update gate so a freshly initialized cell mostly keeps its state.
    """

    def __init__(self, in_features: int, hidden: int, update_bias: float = -1.0):
        super().__init__()
        self.hidden = hidden
        self.update_bias = update_bias
        self.linear = nn.Linear(in_features + hidden, 3 * hidden, bias=False)
        self.norm = nn.LayerNorm(3 * hidden)

    def forward(self, x: Tensor, h_prev: Tensor) -> Tensor:
        parts = self.norm(self.linear(torch.cat([x, h_prev], -1)))
        reset, candidate, update = parts.split(self.hidden, -1)
        reset = torch.sigmoid(reset)
        candidate = torch.tanh(reset * candidate)
        update = torch.sigmoid(update + self.update_bias)
        return update * candidate + (1.0 - update) * h_prev


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, decay: float) -> None:
    """target <- decay * target + (1 - decay) * online, parameters and float buffers.

    Non-persistent buffers (fixed tables such as twohot bins) are left alone.
    """
    for tp, p in zip(target.parameters(), online.parameters()):
        tp.data.mul_(decay).add_(p.data, alpha=1.0 - decay)
    persistent = target.state_dict(keep_vars=True)
    online_buffers = dict(online.named_buffers())
    for name, tb in target.named_buffers():
        if name in persistent and tb.dtype.is_floating_point:
            tb.data.mul_(decay).add_(online_buffers[name].data, alpha=1.0 - decay)


@contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily stop gradients from accumulating on ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def count_parameters(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)
