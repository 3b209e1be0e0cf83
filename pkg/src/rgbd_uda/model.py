"""Dual-encoder RGB-D segmentation network.

Parameter names follow ``rgb_encoder.*``, ``depth_encoder.*``, ``fusion.*``
and ``head.*`` so external weights can be remapped onto them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PYRAMID_STRIDES, Checkpoint, FeaturePyramid, RunConfig, check_image
from .fusion import DepthGuidedFusion, bilinear_resize
from .masking import apply_masks, complement


@dataclass
class EncoderSpec:
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    in_channels: int = 3
    trainable: bool = True

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ValueError("encoder needs exactly four stages")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"stage widths must be non-decreasing, got {self.widths}")


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.dw = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.norm = nn.GroupNorm(1, c)
        self.pw1 = nn.Conv2d(c, 2 * c, 1)
        self.pw2 = nn.Conv2d(2 * c, c, 1)

    def forward(self, x):
        return x + self.pw2(F.gelu(self.pw1(self.norm(self.dw(x)))))


class HierarchicalEncoder(nn.Module):
    """Four conv stages emitting features at strides 4, 8, 16, 32 (ceil division)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        stages = []
        c_in = spec.in_channels
        for i, (c, n) in enumerate(zip(spec.widths, spec.depths)):
            embed = (nn.Conv2d(c_in, c, 7, stride=4, padding=3) if i == 0
                     else nn.Conv2d(c_in, c, 3, stride=2, padding=1))
            stages.append(nn.Sequential(embed, nn.GroupNorm(1, c), *[ResBlock(c) for _ in range(n)]))
            c_in = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(feats, PYRAMID_STRIDES)


class AllLevelHead(nn.Module):
    """Per-level 1x1 projection, upsample to stride 4, concat, fuse, classify."""

    def __init__(self, in_widths, num_classes: int, width: int = 64):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_widths)
        self.fuse = nn.Sequential(nn.Conv2d(width * len(in_widths), width, 1), nn.GroupNorm(1, width), nn.ReLU())
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        size = pyramid[0].shape[-2:]
        x = torch.cat([bilinear_resize(p(f), size) for p, f in zip(self.proj, pyramid)], dim=1)
        return self.classifier(self.fuse(x))


class SegModel(nn.Module):
    def __init__(self, num_classes: int, rgb_spec: EncoderSpec, depth_spec: EncoderSpec | None = None,
                 fusion_mode: str = "local_global", head_width: int = 64,
                 pool_factors_train=(4, 2, 1, 1), pool_factors_eval=(2, 1, 1, 1),
                 bn_momentum: float = 0.1, gamma_init: float = 1.0):
        super().__init__()
        self.num_classes = num_classes
        self.rgb_encoder = HierarchicalEncoder(rgb_spec)
        self.depth_encoder = HierarchicalEncoder(depth_spec) if depth_spec is not None else None
        self.fusion = (DepthGuidedFusion(rgb_spec.widths, depth_spec.widths, fusion_mode,
                                         pool_factors_train, pool_factors_eval, bn_momentum, gamma_init)
                       if depth_spec is not None else None)
        self.head = AllLevelHead(rgb_spec.widths, num_classes, head_width)
        self.set_rgb_frozen(not rgb_spec.trainable)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SegModel":
        rgb = EncoderSpec(cfg.rgb_widths, cfg.rgb_depths, 3, trainable=not cfg.freeze_rgb)
        depth = EncoderSpec(cfg.depth_widths, cfg.depth_depths, 1) if cfg.use_depth else None
        return cls(cfg.num_classes, rgb, depth, cfg.fusion_mode, cfg.head_width,
                   cfg.pool_factors_train, cfg.pool_factors_eval, cfg.fuse_bn_momentum, cfg.fuse_gamma_init)

    @property
    def uses_depth(self) -> bool:
        return self.depth_encoder is not None

    @property
    def rgb_frozen(self) -> bool:
        return self._rgb_frozen

    def set_rgb_frozen(self, frozen: bool) -> None:
        self._rgb_frozen = frozen
        for p in self.rgb_encoder.parameters():
            p.requires_grad_(not frozen)
        if frozen:
            self.rgb_encoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self._rgb_frozen:
            self.rgb_encoder.eval()
        return self

    def encode(self, rgb, depth=None):
        f_rgb = self.rgb_encoder(rgb)
        f_depth = self.depth_encoder(depth) if self.uses_depth else None
        return f_rgb, f_depth

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor | None = None, mask=None,
                depth_mask="complement") -> torch.Tensor:
        """Class logits at input resolution.

        ``mask`` keeps RGB blocks; ``depth_mask`` defaults to its complement
        (pass None to leave depth unmasked). Either may be a per-level list.
        Masks are rejected in eval mode.
        """
        check_image(rgb, "rgb")
        if isinstance(depth_mask, str):
            if mask is None:
                depth_mask = None
            else:
                depth_mask = ([complement(m) for m in mask] if isinstance(mask, (list, tuple))
                              else complement(mask))
        if (mask is not None or depth_mask is not None) and not self.training:
            raise RuntimeError("feature masking is only allowed in train mode")
        if self.uses_depth:
            if depth is None:
                raise ValueError("model expects a depth input")
            check_image(depth, "depth")
            if depth.shape[-2:] != rgb.shape[-2:] or depth.shape[0] != rgb.shape[0]:
                raise ValueError(f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} are not aligned")
        f_rgb, f_depth = self.encode(rgb, depth)
        if mask is not None or depth_mask is not None:
            if self.uses_depth:
                f_rgb, f_depth = apply_masks(f_rgb, f_depth, mask, depth_mask)
            else:
                f_rgb, _ = apply_masks(f_rgb, f_rgb, mask, None)
        if self.uses_depth:
            f_rgb = self.fusion(f_rgb, f_depth)
        logits = self.head(f_rgb)
        return bilinear_resize(logits, rgb.shape[-2:])

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return trainable_parameters(self)


def trainable_parameters(model: SegModel) -> dict[str, nn.Parameter]:
    """Every parameter outside the (frozen) RGB encoder that requires grad."""
    return {n: p for n, p in model.named_parameters()
            if p.requires_grad and not (model.rgb_frozen and n.startswith("rgb_encoder."))}


@dataclass
class LoadReport:
    loaded: list[str]
    missing: list[str]
    unexpected: list[str]
    mismatched: list[str]


def load_rgb_weights(model: SegModel, checkpoint: Checkpoint | dict, strict: bool = False,
                     name_map: dict[str, str] | None = None, prefixes=("rgb_encoder.", "head.")) -> LoadReport:
    """Load RGB encoder and head weights by name, then freeze the RGB encoder.

    ``name_map`` rewrites checkpoint name prefixes (old -> new) before matching.
    """
    params = checkpoint.params if isinstance(checkpoint, Checkpoint) else checkpoint
    renamed = {}
    for name, arr in params.items():
        for old, new in (name_map or {}).items():
            if name.startswith(old):
                name = new + name[len(old):]
                break
        renamed[name] = arr
    own = {n: t for n, t in model.state_dict().items() if n.startswith(tuple(prefixes))}
    loaded, mismatched = [], []
    for name, arr in renamed.items():
        if name not in own:
            continue
        if tuple(np.shape(arr)) != tuple(own[name].shape):
            mismatched.append(name)
            continue
        loaded.append(name)
    missing = sorted(n for n in own if n not in renamed)
    unexpected = sorted(n for n in renamed if n not in own)
    report = LoadReport(sorted(loaded), missing, unexpected, sorted(mismatched))
    if strict and (missing or unexpected or mismatched):
        detail = []
        if mismatched:
            detail.append("shape mismatch: " + ", ".join(
                f"{n} {tuple(np.shape(renamed[n]))} vs {tuple(own[n].shape)}" for n in mismatched))
        if missing:
            detail.append(f"missing: {missing}")
        if unexpected:
            detail.append(f"unexpected: {unexpected}")
        raise RuntimeError("strict load failed; " + "; ".join(detail))
    with torch.no_grad():
        sd = model.state_dict()
        for name in loaded:
            sd[name].copy_(torch.as_tensor(np.asarray(renamed[name])))
    model.set_rgb_frozen(True)
    return report
