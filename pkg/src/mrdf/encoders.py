"""Frame-level unimodal encoders.

Both architectures are applied frame by frame: a ``[B, T, ...]`` input is
folded to ``[B*T, ...]``, encoded, and unfolded to ``[B, T, out_dim]``.

``resnet18_style`` is a ResNet-18 trunk (BasicBlocks, layers 2-2-2-2) with the
stem adapted to the input: audio frame vectors go through 1-D convolutions
with a stride-1 7-tap stem and no max-pool; image crops ``(h, w, c)`` keep
the usual 7x7/2 stem with 3x3/2 max-pool.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
from torch import Tensor

from mrdf.config import EncoderConfig


class SmallMLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = 0, bias: bool = True):
        super().__init__()
        if hidden_dim > 0:
            self.net = nn.Sequential(
                nn.Linear(in_dim, hidden_dim, bias=bias),
                nn.ReLU(),
                nn.Linear(hidden_dim, out_dim, bias=bias),
            )
        else:
            self.net = nn.Linear(in_dim, out_dim, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x.flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, conv, norm, in_ch: int, out_ch: int, stride: int, bias: bool):
        super().__init__()
        self.conv1 = conv(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = norm(out_ch, affine=bias)
        self.conv2 = conv(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = norm(out_ch, affine=bias)
        self.relu = nn.ReLU()
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                conv(in_ch, out_ch, 1, stride=stride, bias=False), norm(out_ch, affine=bias)
            )

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet18Frame(nn.Module):
    def __init__(self, input_shape: Sequence[int], out_dim: int, width: int = 64, bias: bool = True):
        super().__init__()
        self.input_shape = tuple(input_shape)
        if len(self.input_shape) == 1:
            conv, norm, in_ch = nn.Conv1d, nn.BatchNorm1d, 1
            self.stem = nn.Sequential(
                conv(in_ch, width, 7, stride=1, padding=3, bias=False),
                norm(width, affine=bias),
                nn.ReLU(),
            )
            self.pool = nn.AdaptiveAvgPool1d(1)
        elif len(self.input_shape) == 3:
            conv, norm, in_ch = nn.Conv2d, nn.BatchNorm2d, self.input_shape[2]
            self.stem = nn.Sequential(
                conv(in_ch, width, 7, stride=2, padding=3, bias=False),
                norm(width, affine=bias),
                nn.ReLU(),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            self.pool = nn.AdaptiveAvgPool2d(1)
        else:
            raise ValueError(f"resnet18_style expects (d,) or (h, w, c) inputs, got {self.input_shape}")
        layers = []
        in_w = width
        for i, mult in enumerate((1, 2, 4, 8)):
            out_w = width * mult
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(conv, norm, in_w, out_w, stride, bias),
                       BasicBlock(conv, norm, out_w, out_w, 1, bias)]
            in_w = out_w
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(in_w, out_dim, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        if len(self.input_shape) == 1:
            x = x.unsqueeze(1)  # [N, 1, d]
        else:
            x = x.permute(0, 3, 1, 2)  # channels-last crops -> [N, c, h, w]
        x = self.layers(self.stem(x))
        return self.fc(self.pool(x).flatten(1))


class FrameEncoder(nn.Module):
    """Applies a per-frame network over a ``[B, T, ...]`` (or ``[T, ...]``) stack."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_shape = tuple(cfg.input_shape)
        if cfg.arch == "small_mlp":
            self.net = SmallMLP(math.prod(self.input_shape), cfg.out_dim, cfg.hidden_dim, cfg.bias)
        else:
            self.net = ResNet18Frame(self.input_shape, cfg.out_dim, bias=cfg.bias)
        self.out_dim = cfg.out_dim

    def forward(self, frames: Tensor) -> Tensor:
        frame_ndim = len(self.input_shape)
        unbatched = frames.ndim == frame_ndim + 1
        if unbatched:
            frames = frames.unsqueeze(0)
        if frames.ndim != frame_ndim + 2 or tuple(frames.shape[2:]) != self.input_shape:
            raise ValueError(
                f"expected frames of shape [B, T, {', '.join(map(str, self.input_shape))}], "
                f"got {tuple(frames.shape)}"
            )
        b, t = frames.shape[:2]
        if t < 1:
            raise ValueError("need at least one frame")
        out = self.net(frames.reshape(b * t, *self.input_shape)).reshape(b, t, self.out_dim)
        return out[0] if unbatched else out


def build_encoder(cfg: EncoderConfig) -> FrameEncoder:
    return FrameEncoder(cfg)


def encode_audio(frames: Tensor, encoder: FrameEncoder) -> Tensor:
    """Audio frames ``[T, d_a_in]`` (or batched) to frame features ``[T, D_a]``."""
    return encoder(frames)


def encode_visual(frames: Tensor, encoder: FrameEncoder) -> Tensor:
    """Visual frames ``[T, h, w, c]`` or ``[T, d_v_in]`` to ``[T, D_v]``."""
    return encoder(frames)
