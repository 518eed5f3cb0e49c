"""Five-level convolutional encoder standing in for the Swin backbone."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn import ConvNormAct, ShapeError

STRIDES = (4, 8, 16, 32, 64)


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    input_size: int = 64

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ValueError(f"need five positive stage widths, got {self.stage_channels}")
        if self.input_size < 64 or self.input_size % 64:
            raise ValueError(f"input_size must be a positive multiple of 64, got {self.input_size}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, self.input_size // s, self.input_size // s) for c, s in zip(self.stage_channels, STRIDES)]


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    strides: tuple[int, ...] = field(default=STRIDES)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)

    def split(self, n: int) -> list["FeaturePyramid"]:
        """Split a batch-stacked pyramid into ``n`` equal parts."""
        parts = [lvl.chunk(n, dim=0) for lvl in self.levels]
        return [FeaturePyramid([p[i] for p in parts], self.strides) for i in range(n)]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = ConvNormAct(channels, channels, 3)

    def forward(self, x):
        return x + self.body(x)


class Stage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, patch: int):
        super().__init__()
        self.merge = nn.Conv2d(in_channels, out_channels, kernel_size=patch, stride=patch)
        self.norm = nn.GroupNorm(1, out_channels)
        self.blocks = nn.Sequential(ResidualBlock(out_channels), ResidualBlock(out_channels))

    def forward(self, x):
        return self.blocks(F.relu(self.norm(self.merge(x))))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.in_channels,) + cfg.stage_channels
        self.stages = nn.ModuleList(
            Stage(widths[i], widths[i + 1], 4 if i == 0 else 2) for i in range(5)
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        return encode(image, self)


def encode(image: torch.Tensor, backbone: Backbone) -> FeaturePyramid:
    cfg = backbone.cfg
    if image.dim() != 4:
        raise ShapeError(f"encode expects [B,C,S,S], got {tuple(image.shape)}", axis="ndim")
    if image.shape[1] != cfg.in_channels:
        raise ShapeError(f"encode expects {cfg.in_channels} channels, got {image.shape[1]}", axis="channel")
    if tuple(image.shape[2:]) != (cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"encode expects spatial size {cfg.input_size}x{cfg.input_size}, got "
            f"{image.shape[2]}x{image.shape[3]}",
            axis="spatial",
        )
    levels = []
    x = image
    for stage in backbone.stages:
        x = stage(x)
        levels.append(x)
    return FeaturePyramid(levels)


def replicate_thermal(thermal: torch.Tensor, channels: int = 3) -> torch.Tensor:
    if thermal.shape[1] == channels:
        return thermal
    if thermal.shape[1] != 1:
        raise ShapeError(f"thermal must have 1 or {channels} channels, got {thermal.shape[1]}", axis="channel")
    return thermal.expand(-1, channels, -1, -1)


def fuse_rt_input(rgb: torch.Tensor, thermal: torch.Tensor) -> torch.Tensor:
    """Input of the joint branch: pixelwise sum of the two images, clamped to [0, 1]."""
    if rgb.shape != thermal.shape:
        raise ShapeError(f"rgb {tuple(rgb.shape)} and thermal {tuple(thermal.shape)} differ", axis="shape")
    return (rgb + thermal).clamp(0.0, 1.0)
