"""Checkpoint file format and run configuration.

Checkpoint layout (all integers little-endian)::

    b"RSON"                      magic
    u32  format_version          (1)
    u32  entry_count
    entry_count x:
        u32  name_len, name (utf-8)
        u32  ndim, u64[ndim] dims
        u32  dtype tag (0 = float32)
        payload: 4 * prod(dims) bytes, float32 little-endian
    u64  FNV-1a 64 of every preceding byte

Entries are written in sorted name order so identical parameters give
identical files.  Run metadata (config, step, ablation tag) travels in the
``meta/json`` entry, whose float32 payload holds the UTF-8 bytes of a JSON
document one byte per element.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numba
import numpy as np
import torch

from .backbone import BackboneConfig
from .model import ABLATIONS, ModelConfig

MAGIC = b"RSON"
FORMAT_VERSION = 1
DTYPE_F32 = 0
META_KEY = "meta/json"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a64_kernel(buf):
    h = np.uint64(_FNV_OFFSET)
    prime = np.uint64(_FNV_PRIME)
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8)))


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class InventoryMismatchError(CheckpointError):
    def __init__(self, problems: list[str]):
        super().__init__("checkpoint does not match model:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.require(np.asarray(t, dtype="<f4"), requirements="C")


def encode_checkpoint(tensors: Mapping[str, object], meta: dict | None = None) -> bytes:
    entries = {name: _to_numpy(t) for name, t in tensors.items()}
    if META_KEY in entries:
        raise ValueError(f"{META_KEY!r} is reserved")
    if meta:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype("<f4")
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name in sorted(entries):
        arr = entries[name]
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<I", DTYPE_F32)
        out += arr.tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an RSON checkpoint (bad magic)")
    if len(data) < 20:
        raise TruncatedError(f"checkpoint truncated: {len(data)} bytes")
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    body = data[:-8]
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    pos = 12

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {pos}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        (tag,) = struct.unpack("<I", take(4, "dtype"))
        if tag != DTYPE_F32:
            raise CheckpointError(f"entry {name}: unsupported dtype tag {tag}")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4").reshape(dims)
        if name in tensors or (name == META_KEY and meta):
            raise CheckpointError(f"duplicate entry {name}")
        if name == META_KEY:
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after {count} entries")
    if fnv1a64(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    return Checkpoint(tensors, meta)


def save_checkpoint(params: Mapping[str, object], path, meta: dict | None = None) -> None:
    data = encode_checkpoint(params, meta)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    return read_checkpoint(path).tensors


def model_tensors(tensors: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v for k, v in tensors.items() if "/" not in k}


def apply_checkpoint(model: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy weights into ``model`` after checking names and shapes; lists every mismatch."""
    own = model.state_dict()
    given = model_tensors(tensors)
    problems = [f"missing entry {k} {tuple(v.shape)}" for k, v in own.items() if k not in given]
    problems += [f"unexpected entry {k}" for k in given if k not in own]
    problems += [
        f"shape mismatch {k}: checkpoint {tuple(given[k].shape)} vs model {tuple(v.shape)}"
        for k, v in own.items()
        if k in given and tuple(given[k].shape) != tuple(v.shape)
    ]
    if problems:
        raise InventoryMismatchError(sorted(problems))
    model.load_state_dict({k: given[k] for k in own}, strict=True)


# -- run configuration -------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vss_state_dim: int = 8
    ablation: str = "full"
    optimizer: str = "rmsprop"
    lr: float = 1e-4
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    eval_every: int = 100
    val_fraction: float = 0.0
    guidance_weight: float = 1.0
    hflip: bool = False
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            try:
                self.backbone = BackboneConfig(**self.backbone)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backbone: {exc}") from exc
        problems = []
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if not 0 <= self.rho < 1:
            problems.append("rho must lie in [0, 1)")
        if self.optimizer != "rmsprop":
            problems.append(f"unsupported optimizer {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            problems.append(f"ablation must be one of {', '.join(ABLATIONS)}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1 or self.log_every < 1:
            problems.append("batch_size, eval_every, log_every must be >= 1 and steps >= 0")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if self.guidance_weight < 0:
            problems.append("guidance_weight must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.vss_state_dim, self.ablation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(d["backbone"]["stage_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)
