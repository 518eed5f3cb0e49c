"""Saliency generation: selective bimodal fusion, detail enhancement on the
fine levels, semantic interaction on the coarse levels and the top-down
decoder emitting five supervised maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .guidance import ModalitySelection
from .nn import ChannelAttention, Conv, ConvNormAct, ShapeError, SpatialAttention, VSSBlock, resize_like, upsample_bilinear

DDE_LEVELS = (1, 2, 3)
MIS_LEVELS = (4, 5)
# (kernel, dilation) of the four detail-enhancement branches
DDE_BRANCHES = ((1, 1), (3, 3), (5, 5), (7, 7))
# dilation order of the three sub-branches in each interaction branch
MIS_DILATIONS = {"x": (1, 2, 3), "y": (2, 1, 3), "z": (3, 1, 2)}


@dataclass
class SaliencyOutput:
    level_maps: list[torch.Tensor]
    final: torch.Tensor


class SelectiveOptimization(nn.Module):
    """Guidance-enhanced, channel-refined features; the dominant modality's
    spatial attention then reweights the other one."""

    def __init__(self, channels: int):
        super().__init__()
        self.ca = ChannelAttention(channels)
        self.sa = SpatialAttention()

    def fuse(self, f_r, f_t, g, rgb_dominant: bool):
        f_re = f_r * g + f_r
        f_te = f_t * g + f_t
        f_ro = self.ca(f_re) * f_re + f_re
        f_to = self.ca(f_te) * f_te + f_te
        lead, other = (f_ro, f_to) if rgb_dominant else (f_to, f_ro)
        return lead + (self.sa(lead) * other + other)

    def forward(self, f_r, f_t, g_rt, selections: Sequence[ModalitySelection]):
        if f_r.shape != f_t.shape:
            raise ShapeError(f"f_r {tuple(f_r.shape)} and f_t {tuple(f_t.shape)} differ", axis="shape")
        if len(selections) != f_r.shape[0]:
            raise ValueError(f"{len(selections)} selections for a batch of {f_r.shape[0]}")
        g = resize_like(g_rt, f_r)
        rgb_idx = [i for i, s in enumerate(selections) if s.rgb_dominant]
        th_idx = [i for i, s in enumerate(selections) if not s.rgb_dominant]
        if not th_idx:
            return self.fuse(f_r, f_t, g, True)
        if not rgb_idx:
            return self.fuse(f_r, f_t, g, False)
        parts, order = [], []
        for idx, dominant in ((rgb_idx, True), (th_idx, False)):
            sel = torch.tensor(idx)
            parts.append(self.fuse(f_r[sel], f_t[sel], g[sel], dominant))
            order.extend(idx)
        out = torch.cat(parts, dim=0)
        inverse = torch.empty(len(order), dtype=torch.long)
        inverse[torch.tensor(order)] = torch.arange(len(order))
        return out[inverse]


def so_forward(f_r, f_t, g_rt, sel, module: SelectiveOptimization):
    sels = [sel] if isinstance(sel, ModalitySelection) else list(sel)
    return module(f_r, f_t, g_rt, sels)


class DenseDetailEnhancement(nn.Module):
    def __init__(self, channels: int, state_dim: int = 8):
        super().__init__()
        self.branches = nn.ModuleList(ConvNormAct(channels, channels, k, d) for k, d in DDE_BRANCHES)
        self.vss = nn.ModuleList(VSSBlock(channels, state_dim) for _ in DDE_BRANCHES)
        self.project = ConvNormAct(4 * channels, channels, 1)

    def branch_outputs(self, f):
        outs = []
        acc = f
        for conv in self.branches:
            d = conv(acc)
            outs.append(d)
            acc = acc + d  # dense: every later branch sees all earlier outputs plus f
        return outs

    def forward(self, f):
        outs = self.branch_outputs(f)
        return self.project(torch.cat([v(d) for v, d in zip(self.vss, outs)], dim=1))


def dde_forward(f_so, module: DenseDetailEnhancement):
    return module(f_so)


class InteractionBranch(nn.Module):
    def __init__(self, channels: int, dilations: tuple[int, int, int]):
        super().__init__()
        self.subs = nn.ModuleList(ConvNormAct(channels, channels, 3, d) for d in dilations)
        self.merge = ConvNormAct(3 * channels, channels, 3)

    def sub_outputs(self, f):
        s1 = self.subs[0](f)
        s2 = self.subs[1](s1 + f)
        s3 = self.subs[2](s1 + f)
        return s1, s2, s3

    def forward(self, f):
        return self.merge(torch.cat(self.sub_outputs(f), dim=1))


class MutualInteractionSemantic(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.branches = nn.ModuleDict({k: InteractionBranch(channels, d) for k, d in MIS_DILATIONS.items()})
        self.fuse = ConvNormAct(3 * channels, channels, 3)
        self.ca = ChannelAttention(channels)

    def forward(self, f):
        xyz = self.fuse(torch.cat([b(f) for b in self.branches.values()], dim=1))
        return self.ca(xyz) * xyz + xyz


def mis_forward(f_so, module: MutualInteractionSemantic):
    return module(f_so)


class CrossLevelDecoder(nn.Module):
    """Top-down pathway: u5 = f5, u_i = conv3(f_i + proj(up2(u_{i+1})))."""

    def __init__(self, stage_channels):
        super().__init__()
        ch = list(stage_channels)
        self.lift = nn.ModuleList(ConvNormAct(ch[i + 1], ch[i], 1) for i in range(4))
        self.refine = nn.ModuleList(ConvNormAct(ch[i], ch[i], 3) for i in range(4))
        self.heads = nn.ModuleList(Conv(c, 1, 1) for c in ch)

    def forward(self, feats: Sequence[torch.Tensor], out_size: int) -> SaliencyOutput:
        if len(feats) != 5 or any(f is None for f in feats):
            raise ValueError("decoder needs five level features")
        u = [None] * 5
        u[4] = feats[4]
        for i in reversed(range(4)):
            up = self.lift[i](resize_like(u[i + 1], feats[i]))
            u[i] = self.refine[i](feats[i] + up)
        maps = [torch.sigmoid(head(x)) for head, x in zip(self.heads, u)]
        return SaliencyOutput(maps, upsample_bilinear(maps[0], out_size, out_size))


def decode(dde_outs, mis_outs, decoder: CrossLevelDecoder, out_size: int) -> SaliencyOutput:
    return decoder(list(dde_outs) + list(mis_outs), out_size)


# --------------------------------------------------------------------------
# fusions used by the ablation settings in place of selective optimization
# --------------------------------------------------------------------------


class AddFusion(nn.Module):
    def forward(self, f_r, f_t, g_rt=None, selections=None):
        return f_r + f_t


class MulFusion(nn.Module):
    def forward(self, f_r, f_t, g_rt=None, selections=None):
        return f_r * f_t


class ConcatFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.project = ConvNormAct(2 * channels, channels, 1)

    def forward(self, f_r, f_t, g_rt=None, selections=None):
        return self.project(torch.cat([f_r, f_t], dim=1))


class GatedFusion(nn.Module):
    """Per-pixel sigmoid gate blending the two modalities."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = Conv(2 * channels, 1, 3)

    def forward(self, f_r, f_t, g_rt=None, selections=None):
        w = torch.sigmoid(self.gate(torch.cat([f_r, f_t], dim=1)))
        return w * f_r + (1 - w) * f_t


class FixedDirectionSO(nn.Module):
    """Selective optimization with the direction hard-wired and a constant 0.5 guidance map."""

    def __init__(self, channels: int, rgb_dominant: bool):
        super().__init__()
        self.so = SelectiveOptimization(channels)
        self.rgb_dominant = rgb_dominant

    def forward(self, f_r, f_t, g_rt=None, selections=None):
        g = torch.full_like(f_r[:, :1], 0.5)
        return self.so.fuse(f_r, f_t, g, self.rgb_dominant)
