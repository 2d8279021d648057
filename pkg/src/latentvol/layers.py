"""3D building blocks shared by the autoencoder, the denoiser and the control branch."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def num_groups(channels: int, min_group_size: int = 1) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0 and channels // g >= min_group_size:
            return g
    return 1


def norm(channels: int, min_group_size: int = 1) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups(channels, min_group_size), channels, eps=1e-6)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ZeroConv3d(nn.Conv3d):
    """1x1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, kernel_size=1)
        zero_module(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_ch: int = 0):
        super().__init__()
        self.norm1 = norm(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_ch, out_ch) if temb_ch else None
        # a per-channel time offset is erased by a one-channel group, so keep groups wider
        self.norm2 = norm(out_ch, min_group_size=2 if temb_ch else 1)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock3d(nn.Module):
    """Single-head dot-product self-attention over all voxels."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = norm(channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x):
        b, c, *spatial = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        h = torch.einsum("bij,bcj->bci", w, v).reshape(b, c, *spatial)
        return x + self.proj(h)


class Downsample3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch or in_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch or in_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
