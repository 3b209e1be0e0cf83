"""Complementary blockwise feature masks shared across pyramid levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import FeaturePyramid


@dataclass(frozen=True)
class MaskGrid:
    """Binary keep-mask on a base block grid (1 = keep, 0 = drop)."""

    blocks: np.ndarray  # uint8 [batch, GH, GW]
    block_size_px: int
    input_hw: tuple[int, int]

    def __post_init__(self):
        if self.blocks.ndim != 3:
            raise ValueError(f"mask blocks must be [batch, GH, GW], got {self.blocks.shape}")
        gh, gw = grid_shape(self.input_hw, self.block_size_px)
        if self.blocks.shape[1:] != (gh, gw):
            raise ValueError(f"grid {self.blocks.shape[1:]} does not match input {self.input_hw} "
                             f"with block {self.block_size_px} (expected {(gh, gw)})")
        if not np.isin(self.blocks, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def batch(self) -> int:
        return self.blocks.shape[0]


@dataclass(frozen=True)
class MaskSchedule:
    ratio_start: float
    ratio_end: float
    total_iters: int

    def ratio_at(self, t: int) -> float:
        return ratio_at(self, t)


def grid_shape(input_hw, block_size_px: int) -> tuple[int, int]:
    h, w = input_hw
    return -(-h // block_size_px), -(-w // block_size_px)


def sample_mask(batch: int, input_hw, block_size_px: int, ratio: float,
                rng: np.random.Generator) -> MaskGrid:
    """Keep each block independently iff gamma > ratio, gamma ~ U(0, 1)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    if block_size_px < 1:
        raise ValueError("block_size_px must be >= 1")
    gh, gw = grid_shape(input_hw, block_size_px)
    gamma = rng.random((batch, gh, gw))
    # rng.random() draws from [0, 1); gamma == 0 would be dropped at ratio 0
    blocks = (gamma > ratio) | ((gamma == 0.0) & (ratio == 0.0))
    return MaskGrid(blocks.astype(np.uint8), block_size_px, tuple(input_hw))


def complement(mask: MaskGrid) -> MaskGrid:
    return MaskGrid((1 - mask.blocks).astype(np.uint8), mask.block_size_px, mask.input_hw)


def ratio_at(schedule: MaskSchedule, t: int) -> float:
    if not 0 <= t <= schedule.total_iters:
        raise ValueError(f"iteration {t} outside [0, {schedule.total_iters}]")
    if schedule.total_iters == 0:
        return schedule.ratio_start
    return schedule.ratio_start + (schedule.ratio_end - schedule.ratio_start) * t / schedule.total_iters


def project_mask(mask: MaskGrid, level_stride: int, level_hw) -> np.ndarray:
    """Per-cell keep values at one pyramid level.

    A feature cell takes the value of the block covering its center pixel.
    Blocks smaller than the level stride cannot be represented consistently,
    so that level is left unmasked (all ones).
    """
    h, w = level_hw
    if mask.block_size_px < level_stride:
        return np.ones((mask.batch, h, w), dtype=np.uint8)
    gh, gw = mask.blocks.shape[1:]
    rows = np.minimum((np.arange(h) * level_stride + level_stride // 2) // mask.block_size_px, gh - 1)
    cols = np.minimum((np.arange(w) * level_stride + level_stride // 2) // mask.block_size_px, gw - 1)
    return mask.blocks[:, rows[:, None], cols[None, :]]


def _mask_tensor(mask: MaskGrid, stride: int, feat: torch.Tensor) -> torch.Tensor:
    proj = project_mask(mask, stride, feat.shape[-2:])
    return torch.from_numpy(proj).to(device=feat.device, dtype=feat.dtype)[:, None]


def _check_aligned(f_rgb: FeaturePyramid, f_depth: FeaturePyramid, mask: MaskGrid) -> None:
    if len(f_rgb) != len(f_depth):
        raise ValueError("rgb and depth pyramids have different level counts")
    for i, (a, b) in enumerate(zip(f_rgb, f_depth)):
        if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
            raise ValueError(f"level {i}: rgb {tuple(a.shape)} and depth {tuple(b.shape)} not aligned")
        if a.shape[0] != mask.batch:
            raise ValueError(f"mask batch {mask.batch} does not match features batch {a.shape[0]}")
    f_rgb.check_input_size(mask.input_hw)


def apply_masks(f_rgb: FeaturePyramid, f_depth: FeaturePyramid,
                rgb_mask: MaskGrid | list[MaskGrid] | None,
                depth_mask: MaskGrid | list[MaskGrid] | None):
    """Multiply each level by its projected mask; a list gives one mask per level."""
    def per_level(m, i):
        return m[i] if isinstance(m, (list, tuple)) else m

    ref = per_level(rgb_mask if rgb_mask is not None else depth_mask, 0)
    _check_aligned(f_rgb, f_depth, ref)
    out_rgb, out_depth = [], []
    for i, (r, d, s) in enumerate(zip(f_rgb, f_depth, f_rgb.strides)):
        rm, dm = per_level(rgb_mask, i), per_level(depth_mask, i)
        out_rgb.append(r if rm is None else r * _mask_tensor(rm, s, r))
        out_depth.append(d if dm is None else d * _mask_tensor(dm, s, d))
    return FeaturePyramid(out_rgb, f_rgb.strides), FeaturePyramid(out_depth, f_depth.strides)


def apply_complementary(f_rgb: FeaturePyramid, f_depth: FeaturePyramid, mask: MaskGrid,
                        training: bool = True):
    """RGB levels keep the mask, depth levels keep its complement."""
    if not training:
        return f_rgb, f_depth
    return apply_masks(f_rgb, f_depth, mask, complement(mask))


def sample_masks(mode: str, batch: int, input_hw, block_size_px: int, ratio: float,
                 rng: np.random.Generator, levels: int = 4):
    """(rgb_mask, depth_mask) for one of the masking strategies.

    complementary  one grid for all levels, depth gets the complement
    per_level      a fresh complementary pair per level
    independent    rgb and depth grids drawn independently
    rgb            only rgb is masked
    none           no masking
    """
    if mode == "none":
        return None, None
    if mode == "complementary":
        m = sample_mask(batch, input_hw, block_size_px, ratio, rng)
        return m, complement(m)
    if mode == "per_level":
        ms = [sample_mask(batch, input_hw, block_size_px, ratio, rng) for _ in range(levels)]
        return ms, [complement(m) for m in ms]
    if mode == "independent":
        # depth drop rate 1 - ratio gives the same expected retention as complementary
        return (sample_mask(batch, input_hw, block_size_px, ratio, rng),
                sample_mask(batch, input_hw, block_size_px, 1.0 - ratio, rng))
    if mode == "rgb":
        return sample_mask(batch, input_hw, block_size_px, ratio, rng), None
    raise ValueError(f"unknown masking mode {mode!r}")
