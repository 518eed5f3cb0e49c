"""Hybrid deep-supervision loss: BCE + soft IoU + soft F-measure."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .nn import ShapeError

EPS = 1e-7
BETA2 = 0.3


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    # [B, ...] -> [B, rest]; a bare 2-D map counts as one sample
    if x.dim() <= 2:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def _check(s: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if s.shape != g.shape:
        raise ShapeError(f"prediction {tuple(s.shape)} and target {tuple(g.shape)} differ", axis="shape")
    return _per_sample(s), _per_sample(g)


def bce_per_sample(s, g):
    s, g = _check(s, g)
    s = s.clamp(EPS, 1 - EPS)
    return -(g * torch.log(s) + (1 - g) * torch.log(1 - s)).mean(dim=1)


def iou_per_sample(s, g):
    s, g = _check(s, g)
    inter = (s * g).sum(dim=1)
    union = s.sum(dim=1) + g.sum(dim=1) - inter
    return 1 - (inter + 1) / (union + 1)


def fm_per_sample(s, g):
    s, g = _check(s, g)
    tp = (s * g).sum(dim=1)
    precision = tp / (s.sum(dim=1) + EPS)
    recall = tp / (g.sum(dim=1) + EPS)
    f = (1 + BETA2) * precision * recall / (BETA2 * precision + recall + EPS)
    return 1 - f


def bce_loss(s, g):
    return bce_per_sample(s, g).mean()


def iou_loss(s, g):
    return iou_per_sample(s, g).mean()


def fm_loss(s, g):
    return fm_per_sample(s, g).mean()


@dataclass
class LossBreakdown:
    value: torch.Tensor  # differentiable total
    bce: float
    iou: float
    fm: float
    per_map: list[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(self.value.detach())


def resize_target(gt: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Bilinear (area-aware when shrinking) resize of a mask, re-binarized at 0.5."""
    if tuple(gt.shape[-2:]) == (h, w):
        return gt
    small = F.interpolate(gt, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return (small >= 0.5).to(gt.dtype)


def target_pyramid(gt: torch.Tensor, maps: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [resize_target(gt, m.shape[-2], m.shape[-1]) for m in maps]


def total_loss(maps: Sequence[torch.Tensor], gts: Sequence[torch.Tensor]) -> LossBreakdown:
    """Mean over maps and over the batch of bce + iou + fm."""
    if len(maps) != len(gts) or not maps:
        raise ValueError(f"{len(maps)} maps vs {len(gts)} targets")
    bces, ious, fms = [], [], []
    for s, g in zip(maps, gts):
        bces.append(bce_loss(s, g))
        ious.append(iou_loss(s, g))
        fms.append(fm_loss(s, g))
    per_map = [b + i + f for b, i, f in zip(bces, ious, fms)]
    value = torch.stack(per_map).mean()
    n = len(maps)
    return LossBreakdown(
        value=value,
        bce=float(sum(b.detach() for b in bces) / n),
        iou=float(sum(i.detach() for i in ious) / n),
        fm=float(sum(f.detach() for f in fms) / n),
        per_map=[float(p.detach()) for p in per_map],
    )
