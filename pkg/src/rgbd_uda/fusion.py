"""Depth-to-RGB feature refinement, applied separately at every pyramid level."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeaturePyramid


def bilinear_resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def pooled_size(hw, pool_factor: int) -> tuple[int, int]:
    if pool_factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {pool_factor}")
    h, w = hw[0] // pool_factor, hw[1] // pool_factor
    if h == 0 or w == 0:
        raise ValueError(f"pool factor {pool_factor} reduces {tuple(hw)} to zero size")
    return h, w


class GlobalCrossAttention(nn.Module):
    """Single-head attention with queries and keys from depth, values from RGB.

    Both maps are bilinearly downsampled by ``pool_factor`` before attending;
    the result is projected back to the RGB width and upsampled again.
    """

    def __init__(self, rgb_channels: int, depth_channels: int, dim: int | None = None):
        super().__init__()
        dim = dim or rgb_channels
        self.dim = dim
        self.q = nn.Linear(depth_channels, dim)
        self.k = nn.Linear(depth_channels, dim)
        self.v = nn.Linear(rgb_channels, dim)
        self.out = nn.Linear(dim, rgb_channels)

    def attention(self, f_depth: torch.Tensor, f_rgb: torch.Tensor, pool_factor: int = 1):
        """Returns (attended values [B, N, dim], attention [B, N, N], pooled size)."""
        size = pooled_size(f_depth.shape[-2:], pool_factor)
        d = bilinear_resize(f_depth, size).flatten(2).transpose(1, 2)
        r = bilinear_resize(f_rgb, size).flatten(2).transpose(1, 2)
        q, k, v = self.q(d), self.k(d), self.v(r)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)
        return attn @ v, attn, size

    def forward(self, f_depth: torch.Tensor, f_rgb: torch.Tensor, pool_factor: int = 1) -> torch.Tensor:
        if f_depth.shape[-2:] != f_rgb.shape[-2:]:
            raise ValueError(f"depth {tuple(f_depth.shape)} and rgb {tuple(f_rgb.shape)} differ spatially")
        agg, _, size = self.attention(f_depth, f_rgb, pool_factor)
        b = f_rgb.shape[0]
        out = self.out(agg).transpose(1, 2).reshape(b, -1, *size)
        return bilinear_resize(out, f_rgb.shape[-2:])


class LocalGate(nn.Module):
    """sigmoid(conv3x3(depth)) * conv3x3(depth), full resolution."""

    def __init__(self, depth_channels: int, out_channels: int):
        super().__init__()
        self.gate = nn.Conv2d(depth_channels, out_channels, 3, padding=1)
        self.refine = nn.Conv2d(depth_channels, out_channels, 3, padding=1)

    def forward(self, f_depth: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(f_depth)) * self.refine(f_depth)


class ResidualFuse(nn.Module):
    """rgb + ReLU(BN(conv1x1(global || local)))."""

    def __init__(self, channels: int, in_branches: int = 2, bn_momentum: float = 0.1):
        super().__init__()
        self.conv = nn.Conv2d(in_branches * channels, channels, 1)
        self.norm = nn.BatchNorm2d(channels, momentum=bn_momentum)

    def forward(self, f_rgb: torch.Tensor, *branches: torch.Tensor) -> torch.Tensor:
        for b in branches:
            if b.shape != f_rgb.shape:
                raise ValueError(f"branch {tuple(b.shape)} does not match rgb {tuple(f_rgb.shape)}")
        x = torch.cat(branches, dim=1) if len(branches) > 1 else branches[0]
        return f_rgb + F.relu(self.norm(self.conv(x)))


class FusionLevel(nn.Module):
    def __init__(self, rgb_channels: int, depth_channels: int, mode: str = "local_global",
                 bn_momentum: float = 0.1):
        super().__init__()
        self.mode = mode
        self.global_branch = GlobalCrossAttention(rgb_channels, depth_channels) if "global" in mode else None
        self.local_branch = LocalGate(depth_channels, rgb_channels) if "local" in mode else None
        if mode == "add":
            self.proj = nn.Conv2d(depth_channels, rgb_channels, 1)
            n = 1
        else:
            n = (self.global_branch is not None) + (self.local_branch is not None)
        self.fuse = ResidualFuse(rgb_channels, n, bn_momentum)

    def forward(self, f_rgb, f_depth, pool_factor: int = 1):
        if self.mode == "add":
            return self.fuse(f_rgb, self.proj(f_depth))
        branches = []
        if self.global_branch is not None:
            branches.append(self.global_branch(f_depth, f_rgb, pool_factor))
        if self.local_branch is not None:
            branches.append(self.local_branch(f_depth))
        return self.fuse(f_rgb, *branches)


class DepthGuidedFusion(nn.Module):
    """Refines every RGB pyramid level with the aligned depth level.

    The depth pyramid is only read, never modified.
    """

    def __init__(self, rgb_widths, depth_widths, mode: str = "local_global",
                 pool_factors_train=(4, 2, 1, 1), pool_factors_eval=(2, 1, 1, 1),
                 bn_momentum: float = 0.1, gamma_init: float = 1.0):
        super().__init__()
        self.levels = nn.ModuleList(
            FusionLevel(c_r, c_d, mode, bn_momentum) for c_r, c_d in zip(rgb_widths, depth_widths))
        self.pool_factors_train = list(pool_factors_train)
        self.pool_factors_eval = list(pool_factors_eval)
        for lvl in self.levels:
            nn.init.constant_(lvl.fuse.norm.weight, gamma_init)

    def pool_factors(self, mode: str | None = None):
        mode = mode or ("train" if self.training else "eval")
        return self.pool_factors_train if mode == "train" else self.pool_factors_eval

    def forward(self, f_rgb: FeaturePyramid, f_depth: FeaturePyramid, mode: str | None = None) -> FeaturePyramid:
        if len(f_rgb) != len(self.levels) or len(f_depth) != len(self.levels):
            raise ValueError("pyramid level count does not match fusion levels")
        pools = self.pool_factors(mode)
        out = [lvl(r, d, p) for lvl, r, d, p in zip(self.levels, f_rgb, f_depth, pools)]
        return FeaturePyramid(out, f_rgb.strides)

    @torch.no_grad()
    def zero_init(self) -> None:
        """Zero the fuse projection and norm shift so the block is the identity on RGB."""
        for lvl in self.levels:
            nn.init.zeros_(lvl.fuse.conv.weight)
            nn.init.zeros_(lvl.fuse.conv.bias)
            nn.init.zeros_(lvl.fuse.norm.bias)


def global_branch(module: GlobalCrossAttention, f_depth, f_rgb, pool_factor: int = 1):
    return module(f_depth, f_rgb, pool_factor)


def local_branch(module: LocalGate, f_depth):
    return module(f_depth)


def residual_fuse(module: ResidualFuse, f_rgb, f_global, f_local):
    return module(f_rgb, f_global, f_local)


def fuse_pyramids(module: DepthGuidedFusion, f_rgb: FeaturePyramid, f_depth: FeaturePyramid,
                  mode: str = "train") -> FeaturePyramid:
    return module(f_rgb, f_depth, mode)
