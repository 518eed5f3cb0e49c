"""Paired RGB-T samples: directory loading, a seeded synthetic scene
generator and batching.

Directory layout (read and written)::

    <root>/RGB/<id>.png   3-channel 8-bit
    <root>/T/<id>.png     8-bit grayscale thermal
    <root>/GT/<id>.png    8-bit mask, foreground >= 128
    <root>/index.json     synthetic sets only: [{"id", "seed", "regime"}, ...]
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .nn import upsample_bilinear

REGIMES = ("normal", "rgb-hidden", "thermal-hidden")


class DataError(Exception):
    pass


@dataclass
class SamplePair:
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    thermal: np.ndarray  # (1, H, W)
    gt: np.ndarray  # (1, H, W) in {0, 1}
    id: str
    regime: str = "unknown"

    def __post_init__(self):
        shapes = {self.rgb.shape[1:], self.thermal.shape[1:], self.gt.shape[1:]}
        if len(shapes) != 1:
            raise DataError(f"sample {self.id}: spatial sizes differ {shapes}")
        if self.rgb.shape[0] != 3 or self.thermal.shape[0] != 1 or self.gt.shape[0] != 1:
            raise DataError(f"sample {self.id}: bad channel counts")


# -- loading ----------------------------------------------------------------


def read_gray(path) -> np.ndarray:
    """8-bit single-channel image as float64 in [0, 255]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I", "F"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
                if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
                    raise DataError(f"{path}: expected a single-channel (or gray RGB) image")
                return arr[..., 0]
            return np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise DataError(f"{path}: unsupported mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def resize_chw(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[1:] == (size, size):
        return arr.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    return upsample_bilinear(t, size, size)[0].numpy()


def load_pair(rgb_path, thermal_path, gt_path, target_size: int = 64, id: str | None = None) -> SamplePair:
    rgb = read_rgb(rgb_path).transpose(2, 0, 1) / 255.0
    thermal = read_gray(thermal_path)[None] / 255.0
    gt = (read_gray(gt_path)[None] >= 128).astype(np.float32)
    if not (rgb.shape[1:] == thermal.shape[1:] == gt.shape[1:]):
        raise DataError(f"{rgb_path}: modalities have different sizes")
    gt = (resize_chw(gt, target_size) >= 0.5).astype(np.float32)
    return SamplePair(
        resize_chw(rgb, target_size).clip(0, 1),
        resize_chw(thermal, target_size).clip(0, 1),
        gt,
        id or Path(rgb_path).stem,
    )


def dataset_ids(root) -> list[str]:
    root = Path(root)
    for sub in ("RGB", "T", "GT"):
        if not (root / sub).is_dir():
            raise DataError(f"missing directory {root / sub}")
    ids = {sub: {p.stem for p in (root / sub).glob("*.png")} for sub in ("RGB", "T", "GT")}
    common = ids["RGB"] & ids["T"] & ids["GT"]
    stray = (ids["RGB"] | ids["T"] | ids["GT"]) - common
    if stray:
        raise DataError(f"{root}: ids missing a modality: {sorted(stray)[:10]}")
    return sorted(common)


def load_dataset(root, target_size: int = 64) -> list[SamplePair]:
    root = Path(root)
    regimes = {}
    if (root / "index.json").exists():
        regimes = {e["id"]: e.get("regime", "unknown") for e in json.loads((root / "index.json").read_text())}
    out = []
    for i in dataset_ids(root):
        p = load_pair(root / "RGB" / f"{i}.png", root / "T" / f"{i}.png", root / "GT" / f"{i}.png", target_size, i)
        p.regime = regimes.get(i, "unknown")
        out.append(p)
    return out


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_gray(path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x), mode="L").save(path, optimize=False)


def write_dataset(root, samples: Sequence[SamplePair], seed: int | None = None) -> None:
    root = Path(root)
    for sub in ("RGB", "T", "GT"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.rgb.transpose(1, 2, 0)), mode="RGB").save(root / "RGB" / f"{s.id}.png")
        save_gray(root / "T" / f"{s.id}.png", s.thermal[0])
        save_gray(root / "GT" / f"{s.id}.png", s.gt[0])
    index = [{"id": s.id, "seed": seed, "regime": s.regime} for s in samples]
    (root / "index.json").write_text(json.dumps(index, indent=1) + "\n")


# -- synthetic scenes -------------------------------------------------------


@dataclass
class SynthSpec:
    count: int = 16
    size: int = 64
    seed: int = 0
    inconsistency: float = 0.3
    noise_level: float = 0.04
    min_area: float = 0.05
    max_area: float = 0.3

    def __post_init__(self):
        if self.count < 0 or self.size < 8:
            raise ValueError("count must be >= 0 and size >= 8")
        if not 0.0 <= self.inconsistency <= 1.0:
            raise ValueError("inconsistency must lie in [0, 1]")
        if not 0.0 < self.min_area < self.max_area < 0.5:
            raise ValueError("need 0 < min_area < max_area < 0.5")
        if not 0.0 <= self.noise_level <= 0.1:
            raise ValueError("noise_level must lie in [0, 0.1]")

    @property
    def visible_contrast(self) -> tuple[float, float]:
        # object/background offset when a modality shows the object
        return (max(0.25, 3 * self.noise_level), 0.5)


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Smooth zero-mean pattern from a few random plane waves."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(-4, 4, size=2)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return amplitude * tex / 3


def _object_mask(rng: np.random.Generator, size: int, target_area: float) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    radius = np.sqrt(target_area * size * size / np.pi)
    cx, cy = rng.uniform(radius, size - radius, size=2)
    if rng.random() < 0.5:
        rx = radius * rng.uniform(0.7, 1.4)
        ry = radius * radius / rx
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        k = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = radius * rng.uniform(0.8, 1.5, size=k)
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]
        draw.polygon(pts, fill=255)
    return np.asarray(im) >= 128


def _scene_mask(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    size = spec.size
    for _ in range(200):
        n_obj = int(rng.integers(1, 4))
        target = rng.uniform(spec.min_area, spec.max_area)
        shares = rng.dirichlet(np.ones(n_obj)) * target
        mask = np.zeros((size, size), dtype=bool)
        for share in shares:
            mask |= _object_mask(rng, size, max(share, spec.min_area / 3))
        area = mask.mean()
        if spec.min_area <= area <= spec.max_area:
            return mask
    raise RuntimeError("could not place objects within the requested area range")


def _render(rng, mask, base, contrast, noise, tex_amp):
    # brighter or darker object, whichever keeps it inside [0, 1]
    sign = 1.0 if base + contrast <= 0.95 else -1.0
    img = base + _texture(rng, mask.shape[0], tex_amp) + sign * contrast * mask
    img = img + rng.normal(0.0, noise, size=mask.shape)
    return np.clip(img, 0.0, 1.0)


def synth_sample(rng: np.random.Generator, spec: SynthSpec, sid: str) -> SamplePair:
    mask = _scene_mask(rng, spec)
    lo, hi = spec.visible_contrast
    c_rgb, c_t = rng.uniform(lo, hi, size=2)
    regime = "normal"
    if rng.random() < spec.inconsistency:
        hidden = rng.uniform(0.0, 0.5 * spec.noise_level)
        if rng.random() < 0.5:
            regime, c_rgb = "rgb-hidden", hidden
        else:
            regime, c_t = "thermal-hidden", hidden
    base_rgb = rng.uniform(0.25, 0.6)
    tint = rng.uniform(0.75, 1.0, size=3)
    rgb = np.stack([_render(rng, mask, base_rgb * t, c_rgb * t, spec.noise_level, 0.06) for t in tint])
    thermal = _render(rng, mask, rng.uniform(0.2, 0.5), c_t, spec.noise_level, 0.04)[None]
    return SamplePair(
        rgb.astype(np.float32), thermal.astype(np.float32), mask[None].astype(np.float32), sid, regime
    )


def synth_generate(spec: SynthSpec) -> list[SamplePair]:
    rng = np.random.default_rng(spec.seed)
    width = max(4, len(str(max(spec.count - 1, 0))))
    return [synth_sample(rng, spec, f"syn{i:0{width}d}") for i in range(spec.count)]


def contrast(img: np.ndarray, mask: np.ndarray) -> float:
    """|mean(object) - mean(background)| over the channel-mean image."""
    g = np.asarray(img, dtype=np.float64).mean(axis=0)
    m = np.asarray(mask).reshape(g.shape) > 0.5
    return float(abs(g[m].mean() - g[~m].mean()))


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    rgb: torch.Tensor
    thermal: torch.Tensor
    gt: torch.Tensor
    ids: list[str]


def collate(samples: Sequence[SamplePair]) -> Batch:
    return Batch(
        torch.from_numpy(np.stack([s.rgb for s in samples])).float(),
        torch.from_numpy(np.stack([s.thermal for s in samples])).float(),
        torch.from_numpy(np.stack([s.gt for s in samples])).float(),
        [s.id for s in samples],
    )


def batch_iter(samples: Sequence[SamplePair], batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """One pass over ``samples``; the last partial batch is kept."""
    if not samples:
        raise DataError("empty sample list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield collate([samples[i] for i in order[start : start + batch_size]])
