"""Saliency evaluation: MAE, adaptive F-beta, S-measure and E-measure.

All per-image metrics take float maps in [0, 1] (prediction) and a binary
mask (ground truth) and compute in float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ShapeError

BETA2 = 0.3
ALPHA = 0.5
_EPS = np.finfo(np.float64).eps


def _prep(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"prediction {s.shape} and ground truth {g.shape} differ", axis="shape")
    return s, g


def mae(s, g) -> float:
    s, g = _prep(s, g)
    return float(np.mean(np.abs(s - g)))


def adaptive_threshold(s) -> float:
    return min(2.0 * float(np.mean(s)), 1.0)


def adaptive_binarize(s) -> np.ndarray:
    """s >= min(2*mean(s), 1); an all-zero map stays empty."""
    s = np.asarray(s, dtype=np.float64)
    return (s >= adaptive_threshold(s)) & (s > 0)


def f_beta(s, g) -> float:
    s, g = _prep(s, g)
    pred = adaptive_binarize(s)
    gt = g > 0.5
    if not gt.any() and not pred.any():
        return 1.0
    tp = float(np.count_nonzero(pred & gt))
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(pred)
    recall = tp / np.count_nonzero(gt)
    return float((1 + BETA2) * precision * recall / (BETA2 * precision + recall))


# -- S-measure --------------------------------------------------------------


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = float(x.mean())
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + _EPS)


def s_object(s, gt) -> float:
    mu = float(gt.mean())
    fg = s[gt]
    bg = 1.0 - s[~gt]
    return mu * _object_score(fg) + (1 - mu) * _object_score(bg)


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """(col, row) split point, 1-based counts as in the reference definition."""
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return int(math.floor(cols / 2 + 0.5)), int(math.floor(rows / 2 + 0.5))
    x = (gt.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    y = (gt.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(math.floor(x + 0.5)), int(math.floor(y + 0.5))


def _ssim(s: np.ndarray, g: np.ndarray) -> float:
    n = s.size
    if n == 0:
        return 0.0
    x, y = s.mean(), g.mean()
    denom = n - 1 + _EPS
    sx = ((s - x) ** 2).sum() / denom
    sy = ((g - y) ** 2).sum() / denom
    sxy = ((s - x) * (g - y)).sum() / denom
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + _EPS))
    if beta == 0:
        return 1.0
    return 0.0


def s_region(s, gt) -> float:
    rows, cols = gt.shape
    cx, cy = centroid(gt)
    area = rows * cols
    g = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, None)),
                   (slice(cy, None), slice(0, cx)), (slice(cy, None), slice(cx, None))):
        block = s[rs, cs]
        score += block.size / area * _ssim(block, g[rs, cs])
    return score


def s_measure(s, g) -> float:
    s, g = _prep(s, g)
    gt = g > 0.5
    y = gt.mean()
    if y == 0:
        value = 1.0 - s.mean()
    elif y == 1:
        value = s.mean()
    else:
        value = ALPHA * s_object(s, gt) + (1 - ALPHA) * s_region(s, gt)
    return float(min(max(value, 0.0), 1.0))


# -- E-measure --------------------------------------------------------------


def e_measure(s, g) -> float:
    s, g = _prep(s, g)
    pred = adaptive_binarize(s).astype(np.float64)
    gt = (g > 0.5).astype(np.float64)
    if gt.sum() == 0:
        enhanced = 1.0 - pred
    elif gt.sum() == gt.size:
        enhanced = pred
    else:
        phi_s = pred - pred.mean()
        phi_g = gt - gt.mean()
        num = 2 * phi_s * phi_g
        den = phi_s * phi_s + phi_g * phi_g
        align = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        enhanced = (1 + align) ** 2 / 4
    return float(np.clip(enhanced.mean(), 0.0, 1.0))


# -- reports ----------------------------------------------------------------

METRIC_NAMES = ("mae", "f_beta", "s_measure", "e_measure")


@dataclass
class MetricReport:
    mae: float
    f_beta: float
    s_measure: float
    e_measure: float
    count: int = 1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mae, self.f_beta, self.s_measure, self.e_measure)

    def row(self, digits: int = 3) -> str:
        return " ".join(f"{v:.{digits}f}" for v in self.as_tuple())


def evaluate_pair(s, g) -> MetricReport:
    return MetricReport(mae(s, g), f_beta(s, g), s_measure(s, g), e_measure(s, g))


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    cols = np.array([r.as_tuple() for r in reports], dtype=np.float64)
    return MetricReport(*(float(v) for v in cols.mean(axis=0)), count=len(reports))


class MissingFilesError(FileNotFoundError):
    def __init__(self, missing_pred: list[str], missing_gt: list[str]):
        parts = []
        if missing_pred:
            parts.append("no prediction for: " + ", ".join(missing_pred))
        if missing_gt:
            parts.append("no ground truth for: " + ", ".join(missing_gt))
        super().__init__("; ".join(parts))
        self.missing_pred = missing_pred
        self.missing_gt = missing_gt


def _listing(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}


def _load_gray(path: Path):
    from .data import read_gray

    return read_gray(path)


def evaluate_dir(pred_dir, gt_dir) -> tuple[MetricReport, list[tuple[str, MetricReport]]]:
    """Average the four metrics over matching files (sorted by name)."""
    import torch

    from .nn import upsample_bilinear

    preds, gts = _listing(Path(pred_dir)), _listing(Path(gt_dir))
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        raise MissingFilesError(missing_pred, missing_gt)
    if not gts:
        raise FileNotFoundError(f"no images in {gt_dir}")
    rows = []
    for name in sorted(gts):
        s = _load_gray(preds[name]) / 255.0
        g = (_load_gray(gts[name]) >= 128).astype(np.float64)
        if s.shape != g.shape:
            t = torch.from_numpy(s).float()[None, None]
            s = upsample_bilinear(t, *g.shape)[0, 0].double().numpy().clip(0, 1)
        rows.append((name, evaluate_pair(s, g)))
    return mean_report([r for _, r in rows]), rows


def write_csv(path, rows: list[tuple[str, MetricReport]], summary: MetricReport | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + METRIC_NAMES)
        for name, r in rows:
            w.writerow((name,) + tuple(f"{v:.6f}" for v in r.as_tuple()))
        if summary is not None:
            w.writerow(("mean",) + tuple(f"{v:.6f}" for v in summary.as_tuple()))


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    width = max([len("setting")] + [len(n) for n, _ in rows])
    lines = [f"{'setting':<{width}}  {'M':>6} {'Fb':>6} {'Sa':>6} {'Ee':>6}"]
    for name, r in rows:
        lines.append(f"{name:<{width}}  " + " ".join(f"{v:6.4f}" for v in r.as_tuple()))
    return "\n".join(lines)
