"""Region guidance: context interaction, spatial-aware fusion, guidance maps
and the hard choice of the dominant modality."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import FeaturePyramid
from .nn import Conv, ConvNormAct, ShapeError, reduce, resize_like

# kernel sizes of the context-interaction branches, by pyramid level (1-based)
CI_KERNELS = {1: (1, 3, 5, 7), 2: (1, 3, 5), 3: (1, 3, 5), 4: (1, 3), 5: (1, 3)}


class Modality(str, enum.Enum):
    RGB = "rgb"
    THERMAL = "thermal"


@dataclass(frozen=True)
class ModalitySelection:
    choice: Modality
    delta_r: float
    delta_t: float
    tie_broken: bool = False

    @property
    def rgb_dominant(self) -> bool:
        return self.choice is Modality.RGB


@dataclass
class GuidanceTriple:
    g_r: torch.Tensor
    g_t: torch.Tensor
    g_rt: torch.Tensor
    m_r: torch.Tensor
    m_t: torch.Tensor
    m_rt: torch.Tensor

    def maps(self) -> list[torch.Tensor]:
        return [self.g_r, self.g_t, self.g_rt]


class ContextInteraction(nn.Module):
    """Chained multi-kernel branches; each branch sees the previous output plus the input."""

    def __init__(self, channels: int, level: int):
        super().__init__()
        if level not in CI_KERNELS:
            raise ValueError(f"level must be in 1..5, got {level}")
        self.level = level
        self.branches = nn.ModuleList(ConvNormAct(channels, channels, k) for k in CI_KERNELS[level])
        self.project = ConvNormAct(channels * len(self.branches), channels, 1)

    def branch_outputs(self, f: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        prev = None
        for conv in self.branches:
            prev = conv(f if prev is None else prev + f)
            outs.append(prev)
        return outs

    def forward(self, f):
        return self.project(torch.cat(self.branch_outputs(f), dim=1))


def ci_forward(level: int, f: torch.Tensor, module: ContextInteraction) -> torch.Tensor:
    if module.level != level:
        raise ValueError(f"module built for level {module.level}, called with level {level}")
    return module(f)


class SpatialRefine(nn.Module):
    """Two 3x3 convs, then reweight by a map built from the channel-wise max."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_a = ConvNormAct(channels, channels, 3)
        self.conv_b = ConvNormAct(channels, channels, 3)
        self.weight_conv = Conv(1, 1, 1)

    def weight_map(self, fc: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.weight_conv(reduce(fc, "max_over_channels")))

    def forward(self, x):
        fc = self.conv_b(self.conv_a(x))
        return fc * self.weight_map(fc) + fc


class SpatialFusion(nn.Module):
    def __init__(self, channels: int, prev_channels: int | None = None):
        super().__init__()
        self.current = SpatialRefine(channels)
        if prev_channels is None:
            self.align = None
            self.previous = None
        else:
            self.align = ConvNormAct(prev_channels, channels, 1)
            self.previous = SpatialRefine(channels)

    def forward(self, f_ci, f_prev=None):
        out = self.current(f_ci)
        if f_prev is None:
            return out
        if self.previous is None:
            raise ValueError("this fusion level has no coarser input")
        aligned = self.align(resize_like(f_prev, f_ci))
        if aligned.shape != f_ci.shape:
            raise ShapeError(f"aligned coarse feature {tuple(aligned.shape)} != {tuple(f_ci.shape)}", axis="shape")
        return out + self.previous(aligned)


def sf_forward(f_ci, f_prev, module: SpatialFusion):
    return module(f_ci, f_prev)


class GuidanceHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = Conv(channels, 1, 1)

    def forward(self, f):
        return torch.sigmoid(self.conv(f))


class GuidanceDecoder(nn.Module):
    """CI per level, SF from coarsest to finest, then a single-channel head."""

    def __init__(self, stage_channels):
        super().__init__()
        ch = list(stage_channels)
        self.ci = nn.ModuleList(ContextInteraction(ch[i], i + 1) for i in range(5))
        self.sf = nn.ModuleList(SpatialFusion(ch[i], ch[i + 1] if i < 4 else None) for i in range(5))
        self.head = GuidanceHead(ch[0])

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        fused = None
        for i in reversed(range(5)):
            fused = self.sf[i](self.ci[i](pyramid[i]), fused)
        return self.head(fused)


def mean_activation(g: torch.Tensor) -> torch.Tensor:
    """Per-sample spatial mean of a [B,1,H,W] guidance map."""
    if g.dim() != 4 or g.shape[1] != 1:
        raise ShapeError(f"expected a [B,1,H,W] map, got {tuple(g.shape)}", axis="channel")
    return g.mean(dim=(1, 2, 3))


def select_modality(m_r: float, m_t: float, m_rt: float) -> ModalitySelection:
    """Pick the modality whose guidance mean is closer to the joint one; ties go to RGB."""
    m_r, m_t, m_rt = float(m_r), float(m_t), float(m_rt)
    delta_r = abs(m_r - m_rt)
    delta_t = abs(m_t - m_rt)
    choice = Modality.RGB if delta_r <= delta_t else Modality.THERMAL
    return ModalitySelection(choice, delta_r, delta_t, tie_broken=delta_r == delta_t)


def select_batch(m_r: torch.Tensor, m_t: torch.Tensor, m_rt: torch.Tensor) -> list[ModalitySelection]:
    # the decision is made on detached 64-bit copies; no gradient flows through it
    vals = [m.detach().double().flatten().tolist() for m in (m_r, m_t, m_rt)]
    return [select_modality(a, b, c) for a, b, c in zip(*vals)]
