"""Tensor primitives and small building blocks shared by every RSONet module.

Tensors are plain ``torch.Tensor`` objects (float32, NCHW); reverse-mode
differentiation is torch autograd.  The functions here add the shape
contracts the rest of the package relies on (``ConvSpec`` padding rule,
four-axis layout checks) plus the attention gates and the four-direction
selective scan used inside the detail-enhancement branches.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DEBUG = os.environ.get("RSONET_DEBUG", "") not in ("", "0")

REDUCE_MODES = ("global_max_spatial", "global_avg_spatial", "max_over_channels", "avg_over_channels")
SCAN_ORDERS = ("row", "row_reversed", "col", "col_reversed")


class ShapeError(ValueError):
    """Raised when a tensor does not fit an op's shape contract."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite values in {name}")
        self.name = name


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if DEBUG and not torch.isfinite(x).all():
        raise NonFiniteError(name)
    return x


def _require_4d(x: torch.Tensor, op: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{op} expects a 4-D [B,C,H,W] tensor, got shape {tuple(x.shape)}", axis="ndim")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride != 1:
            raise ValueError("only stride 1 convolutions are size-preserving")
        if self.in_channels < 1 or self.out_channels < 1 or self.dilation < 1:
            raise ValueError(f"invalid conv spec {self}")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


def conv2d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Size-preserving (dilated) convolution with an explicit shape contract."""
    _require_4d(x, "conv2d")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, spec expects {spec.in_channels}", axis="channel")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {tuple(weight.shape)} != {spec.weight_shape}", axis="weight")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({spec.out_channels},)", axis="bias")
    out = F.conv2d(x, weight, bias, padding=spec.padding, dilation=spec.dilation)
    return check_finite(out, "conv2d")


def reduce(x: torch.Tensor, mode: str) -> torch.Tensor:
    _require_4d(x, "reduce")
    if mode == "global_max_spatial":
        return x.amax(dim=(2, 3), keepdim=True)
    if mode == "global_avg_spatial":
        return x.mean(dim=(2, 3), keepdim=True)
    if mode == "max_over_channels":
        return x.amax(dim=1, keepdim=True)
    if mode == "avg_over_channels":
        return x.mean(dim=1, keepdim=True)
    raise ValueError(f"unknown reduce mode {mode!r}; expected one of {REDUCE_MODES}")


def upsample_bilinear(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize, half-pixel centres (align_corners=False)."""
    _require_4d(x, "upsample_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}", axis="spatial")
    if (out_h, out_w) == tuple(x.shape[2:]):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def resize_like(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return upsample_bilinear(x, ref.shape[2], ref.shape[3])


def channel_attention(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    # pool first so the 1x1 conv mixes channels of the pooled descriptor
    c = x.shape[1]
    pooled = reduce(x, "global_avg_spatial")
    return torch.sigmoid(conv2d(pooled, ConvSpec(c, c, 1), weight, bias))


def spatial_attention(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    stats = torch.cat([reduce(x, "avg_over_channels"), reduce(x, "max_over_channels")], dim=1)
    return torch.sigmoid(conv2d(stats, ConvSpec(2, 1, 7), weight, bias))


def grad_of(loss: torch.Tensor) -> None:
    """Backpropagate a scalar loss, accumulating into every leaf's ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"grad_of needs a single-element loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


# --------------------------------------------------------------------------
# selective scan
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VssSpec:
    channels: int
    state_dim: int = 8
    chunk: int = 16

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    @property
    def scan_orders(self) -> tuple[str, ...]:
        return SCAN_ORDERS


def scan_permutation(order: str, h: int, w: int) -> torch.Tensor:
    """Indices into the row-major flattened grid visited by ``order``."""
    grid = torch.arange(h * w).reshape(h, w)
    if order == "row":
        return grid.flatten()
    if order == "row_reversed":
        return grid.flatten().flip(0)
    if order == "col":
        return grid.t().flatten()
    if order == "col_reversed":
        return grid.t().flatten().flip(0)
    raise ValueError(f"unknown scan order {order!r}")


def selective_scan(u, delta, A, B, C, D, chunk: int = 16):
    """Diagonal linear recurrence over the sequence axis.

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * u_t * B_t
    y_t = <C_t, h_t> + D * u_t

    Shapes: u, delta (Bt, L, Ch); A, D (Ch,); B, C (Bt, L, N); the state h
    is (Ch, N) per sequence.  Inside a chunk the causal decay matrix is
    formed explicitly; the state is carried across chunks sequentially.
    """
    bt, length, ch = u.shape
    n = B.shape[-1]
    t = min(chunk, length)
    k = -(-length // t)
    pad = k * t - length
    d_a = delta * A  # <= 0
    x = delta * u
    if pad:
        d_a, x = F.pad(d_a, (0, 0, 0, pad)), F.pad(x, (0, 0, 0, pad))
        B, C = F.pad(B, (0, 0, 0, pad)), F.pad(C, (0, 0, 0, pad))
    d_a = d_a.reshape(bt, k, t, ch)
    x = x.reshape(bt, k, t, ch)
    B = B.reshape(bt, k, t, n)
    C = C.reshape(bt, k, t, n)
    cum = d_a.cumsum(dim=2)
    seg = cum.unsqueeze(3) - cum.unsqueeze(2)  # (Bt, K, T_t, T_s, Ch)
    causal = torch.ones(t, t, dtype=torch.bool, device=u.device).tril()
    decay = seg.masked_fill(~causal.view(1, 1, t, t, 1), float("-inf")).exp()
    cb = torch.einsum("bktn,bksn->bkts", C, B)
    y_local = torch.einsum("bktsc,bkts,bksc->bktc", decay, cb, x)
    # state at each chunk end from that chunk's own inputs
    tail = (cum[:, :, -1:] - cum).exp()
    s_local = torch.einsum("bksc,bksn->bkcn", tail * x, B)
    carry = u.new_zeros(bt, ch, n)
    ys = []
    for i in range(k):
        ys.append(y_local[:, i] + cum[:, i].exp() * torch.einsum("btn,bcn->btc", C[:, i], carry))
        carry = cum[:, i, -1].exp().unsqueeze(-1) * carry + s_local[:, i]
    y = torch.stack(ys, dim=1).reshape(bt, k * t, ch)[:, :length]
    return y + D * u


def vss_block(x: torch.Tensor, spec: VssSpec, params: dict[str, torch.Tensor]) -> torch.Tensor:
    """Four-direction selective scan with a sigmoid gate and residual.

    ``params`` keys: ``dt_w`` (C,C), ``dt_b`` (C,), ``b_w`` (N,C), ``c_w`` (N,C),
    ``a_raw`` (C,), ``d`` (C,), ``gate_w`` (C,C), ``gate_b`` (C,).  The decay
    rate is ``A = -softplus(a_raw)``, one per channel.
    """
    _require_4d(x, "vss_block")
    b, c, h, w = x.shape
    if c != spec.channels:
        raise ShapeError(f"vss_block: {c} channels, spec expects {spec.channels}", axis="channel")
    seq = x.flatten(2).transpose(1, 2)  # (B, L, C) row-major
    delta = F.softplus(F.linear(seq, params["dt_w"], params["dt_b"]))
    b_t = F.linear(seq, params["b_w"])
    c_t = F.linear(seq, params["c_w"])
    a = -F.softplus(params["a_raw"])

    perms = [scan_permutation(o, h, w).to(x.device) for o in SCAN_ORDERS]
    stack = lambda z: torch.cat([z[:, p] for p in perms], dim=0)  # noqa: E731
    y = selective_scan(stack(seq), stack(delta), a, stack(b_t), stack(c_t), params["d"], spec.chunk)
    y = y.reshape(len(perms), b, h * w, c)
    merged = torch.zeros_like(seq)
    for i, p in enumerate(perms):
        merged = merged.index_add(1, p, y[i])
    merged = merged / len(perms)
    gate = torch.sigmoid(F.linear(seq, params["gate_w"], params["gate_b"]))
    out = seq + gate * merged
    return check_finite(out.transpose(1, 2).reshape(b, c, h, w), "vss_block")


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------


def _uniform_(t: torch.Tensor, fan_in: int) -> None:
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound)


class Conv(nn.Module):
    """Plain size-preserving convolution (gates and prediction heads)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, dilation: int = 1):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel_size, dilation)
        self.weight = nn.Parameter(torch.empty(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.empty(out_channels))
        fan_in = in_channels * kernel_size * kernel_size
        _uniform_(self.weight, fan_in)
        _uniform_(self.bias, fan_in)

    def forward(self, x):
        return conv2d(x, self.spec, self.weight, self.bias)


class ConvNormAct(nn.Module):
    """Convolution -> group norm (one group) -> ReLU.

    Setting ``plain = True`` bypasses norm and activation; the structural
    tests use it to check wiring with identity kernels.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, dilation: int = 1):
        super().__init__()
        self.conv = Conv(in_channels, out_channels, kernel_size, dilation)
        self.norm = nn.GroupNorm(1, out_channels)
        self.plain = False

    def forward(self, x):
        y = self.conv(x)
        if self.plain:
            return y
        return F.relu(self.norm(y))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = Conv(channels, channels, 1)

    def forward(self, x):
        return channel_attention(x, self.conv.weight, self.conv.bias)


class SpatialAttention(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = Conv(2, 1, 7)

    def forward(self, x):
        return spatial_attention(x, self.conv.weight, self.conv.bias)


class VSSBlock(nn.Module):
    def __init__(self, channels: int, state_dim: int = 8, chunk: int = 16):
        super().__init__()
        self.spec = VssSpec(channels, state_dim, chunk)
        c, n = channels, state_dim
        self.dt_w = nn.Parameter(torch.empty(c, c))
        self.dt_b = nn.Parameter(torch.empty(c))
        self.b_w = nn.Parameter(torch.empty(n, c))
        self.c_w = nn.Parameter(torch.empty(n, c))
        self.gate_w = nn.Parameter(torch.empty(c, c))
        self.gate_b = nn.Parameter(torch.empty(c))
        for p in (self.dt_w, self.dt_b, self.b_w, self.c_w, self.gate_w, self.gate_b):
            _uniform_(p, c)
        # A = -softplus(a_raw) < 0, decay rates spread across channels
        self.a_raw = nn.Parameter(torch.linspace(-1.0, 2.0, c))
        self.d = nn.Parameter(torch.ones(c))
        self.passthrough = False

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in ("dt_w", "dt_b", "b_w", "c_w", "a_raw", "d", "gate_w", "gate_b")}

    def forward(self, x):
        if self.passthrough:
            return x
        return vss_block(x, self.spec, self.params())


def set_plain(module: nn.Module, plain: bool = True) -> nn.Module:
    """Toggle norm/activation bypass and VSS passthrough on every submodule."""
    for m in module.modules():
        if isinstance(m, ConvNormAct):
            m.plain = plain
        elif isinstance(m, VSSBlock):
            m.passthrough = plain
    return module
