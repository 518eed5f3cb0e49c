"""The assembled two-stage network and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid, fuse_rt_input, replicate_thermal
from .guidance import GuidanceDecoder, GuidanceTriple, ModalitySelection, mean_activation, select_batch
from .saliency import (
    DDE_LEVELS,
    MIS_LEVELS,
    AddFusion,
    ConcatFusion,
    CrossLevelDecoder,
    DenseDetailEnhancement,
    FixedDirectionSO,
    GatedFusion,
    MulFusion,
    MutualInteractionSemantic,
    SaliencyOutput,
    SelectiveOptimization,
)

ABLATIONS = (
    "full",
    "wo-so-add",
    "wo-so-mul",
    "wo-so-cat",
    "wo-so-gate",
    "force-r2t",
    "force-t2r",
    "wo-dde",
    "wo-mis",
    "wo-dde-mis",
)
# settings that delete the whole region guidance stage
NO_GUIDANCE = ("wo-so-add", "wo-so-mul", "wo-so-cat", "wo-so-gate", "force-r2t", "force-t2r")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vss_state_dim: int = 8
    ablation: str = "full"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")

    @property
    def uses_guidance(self) -> bool:
        return self.ablation not in NO_GUIDANCE

    @property
    def uses_dde(self) -> bool:
        return self.ablation not in ("wo-dde", "wo-dde-mis")

    @property
    def uses_mis(self) -> bool:
        return self.ablation not in ("wo-mis", "wo-dde-mis")


@dataclass
class RSONetOutput:
    saliency: SaliencyOutput
    guidance: GuidanceTriple | None = None
    selections: list[ModalitySelection] | None = None


def _make_fusion(tag: str, channels: int) -> nn.Module:
    if tag == "wo-so-add":
        return AddFusion()
    if tag == "wo-so-mul":
        return MulFusion()
    if tag == "wo-so-cat":
        return ConcatFusion(channels)
    if tag == "wo-so-gate":
        return GatedFusion(channels)
    if tag == "force-r2t":
        return FixedDirectionSO(channels, rgb_dominant=True)
    if tag == "force-t2r":
        return FixedDirectionSO(channels, rgb_dominant=False)
    return SelectiveOptimization(channels)


class RSONet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        ch = cfg.backbone.stage_channels
        self.backbone = Backbone(cfg.backbone)
        self.guidance = GuidanceDecoder(ch) if cfg.uses_guidance else None
        self.fusion = nn.ModuleList(_make_fusion(cfg.ablation, c) for c in ch)
        self.dde = nn.ModuleDict()
        self.mis = nn.ModuleDict()
        if cfg.uses_dde:
            for lvl in DDE_LEVELS:
                self.dde[str(lvl)] = DenseDetailEnhancement(ch[lvl - 1], cfg.vss_state_dim)
        if cfg.uses_mis:
            for lvl in MIS_LEVELS:
                self.mis[str(lvl)] = MutualInteractionSemantic(ch[lvl - 1])
        self.decoder = CrossLevelDecoder(ch)

    def encode_inputs(self, rgb, thermal, joint: bool = True) -> list[FeaturePyramid]:
        thermal = replicate_thermal(thermal, rgb.shape[1])
        images = [rgb, thermal]
        if joint:
            images.append(fuse_rt_input(rgb, thermal))
        # one shared encoder; run all inputs as a single stacked batch
        return self.backbone(torch.cat(images, dim=0)).split(len(images))

    def guidance_stage(self, pyramids: list[FeaturePyramid]):
        n = pyramids[0][0].shape[0]
        stacked = FeaturePyramid([torch.cat([p[i] for p in pyramids], dim=0) for i in range(5)])
        g_r, g_t, g_rt = self.guidance(stacked).split(n, dim=0)
        triple = GuidanceTriple(g_r, g_t, g_rt, mean_activation(g_r), mean_activation(g_t), mean_activation(g_rt))
        return triple, select_batch(triple.m_r, triple.m_t, triple.m_rt)

    def saliency_stage(self, pyr_r, pyr_t, g_rt, selections, out_size: int) -> SaliencyOutput:
        feats = []
        for i in range(5):
            f = self.fusion[i](pyr_r[i], pyr_t[i], g_rt, selections)
            key = str(i + 1)
            if key in self.dde:
                f = self.dde[key](f)
            elif key in self.mis:
                f = self.mis[key](f)
            feats.append(f)
        return self.decoder(feats, out_size)

    def forward(self, rgb: torch.Tensor, thermal: torch.Tensor) -> RSONetOutput:
        size = rgb.shape[-1]
        if self.guidance is None:
            pyr_r, pyr_t = self.encode_inputs(rgb, thermal, joint=False)
            return RSONetOutput(self.saliency_stage(pyr_r, pyr_t, None, None, size))
        pyr_r, pyr_t, pyr_rt = self.encode_inputs(rgb, thermal)
        triple, selections = self.guidance_stage([pyr_r, pyr_t, pyr_rt])
        # stage 2 reads the joint map as a fixed prior; the guidance branch
        # learns only from its own supervision
        sal = self.saliency_stage(pyr_r, pyr_t, triple.g_rt.detach(), selections, size)
        return RSONetOutput(sal, triple, selections)


def run_guidance_stage(rgb, thermal, model: RSONet):
    """Returns (GuidanceTriple, selections, [R, T, RT] pyramids)."""
    if model.guidance is None:
        raise ValueError(f"ablation {model.cfg.ablation!r} has no region guidance stage")
    pyramids = model.encode_inputs(rgb, thermal)
    triple, selections = model.guidance_stage(pyramids)
    return triple, selections, pyramids


def parameter_inventory(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in model.state_dict().items()}
