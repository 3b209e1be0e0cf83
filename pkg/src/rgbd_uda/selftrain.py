"""EMA-teacher self-training with class mix and complementary feature masking."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, Checkpoint, RunConfig, save_checkpoint, seeded_rng, state_dict_to_numpy
from .masking import MaskSchedule, ratio_at, sample_masks
from .model import SegModel, trainable_parameters

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class LrSchedule:
    base_lrs: Mapping[str, float]
    warmup_iters: int = 1500
    total_iters: int = 20000
    power: float = 0.9


def lr_at(schedule: LrSchedule, t: int, group: str) -> float:
    """Linear warm-up to the base rate, then polynomial decay to zero."""
    if not 0 <= t <= schedule.total_iters:
        raise ValueError(f"iteration {t} outside [0, {schedule.total_iters}]")
    base = schedule.base_lrs[group]
    if t < schedule.warmup_iters:
        return base * t / schedule.warmup_iters
    span = schedule.total_iters - schedule.warmup_iters
    if span <= 0:
        return base
    return base * (1.0 - (t - schedule.warmup_iters) / span) ** schedule.power


# ---------------------------------------------------------------------------
# EMA teacher


class TeacherState:
    def __init__(self, model: SegModel, momentum: float = 0.999):
        self.model = model
        self.momentum = momentum
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_student(cls, student: SegModel, momentum: float = 0.999) -> "TeacherState":
        return cls(copy.deepcopy(student), momentum)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: SegModel, alpha: float | None = None) -> TeacherState:
    """teacher <- alpha * teacher + (1 - alpha) * student, for every trainable parameter.

    Float buffers (norm running statistics) follow the same rule, integer
    buffers are copied.
    """
    alpha = teacher.momentum if alpha is None else alpha
    t_params = dict(teacher.model.named_parameters())
    s_params = dict(student.named_parameters())
    t_bufs = dict(teacher.model.named_buffers())
    s_bufs = dict(student.named_buffers())
    if t_params.keys() != s_params.keys() or t_bufs.keys() != s_bufs.keys():
        diff = sorted(set(t_params) ^ set(s_params) | set(t_bufs) ^ set(s_bufs))
        raise ValueError(f"teacher/student parameter names differ: {diff}")
    for name, tp in list(t_params.items()) + list(t_bufs.items()):
        sp = s_params[name] if name in s_params else s_bufs[name]
        if tp.shape != sp.shape:
            raise ValueError(f"teacher/student shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        if not tp.is_floating_point():
            tp.copy_(sp)
        elif name in s_params and not sp.requires_grad:
            # frozen weights: the average of equal values must stay bit-identical
            tp.copy_(sp)
        elif alpha == 1.0:
            continue
        elif alpha == 0.0:
            tp.copy_(sp)
        else:
            tp.mul_(alpha).add_(sp.detach(), alpha=1.0 - alpha)
    return teacher


# ---------------------------------------------------------------------------
# pseudo labels and class mix


def confidence_from_logits(logits: torch.Tensor, threshold: float):
    prob = torch.softmax(logits.float(), dim=1)
    max_prob, labels = prob.max(dim=1)
    weight = (max_prob > threshold).float().flatten(1).mean(dim=1)
    return labels, weight


@torch.no_grad()
def pseudo_label(teacher: TeacherState | SegModel, target_rgb, target_depth=None, threshold: float = 0.968):
    """Argmax labels and per-image confidence weight from the teacher.

    The weight is the fraction of pixels whose top softmax probability
    exceeds ``threshold``.
    """
    model = teacher.model if isinstance(teacher, TeacherState) else teacher
    was_training = model.training
    model.eval()
    logits = model(target_rgb, target_depth if model.uses_depth else None)
    model.train(was_training)
    return confidence_from_logits(logits, threshold)


def class_mix_mask(src_labels: torch.Tensor, rng: np.random.Generator, fraction: float = 0.5) -> torch.Tensor:
    """Per image, the union of pixels of a random subset of the present source classes."""
    masks = []
    for lab in src_labels:
        classes = torch.unique(lab)
        classes = classes[classes != IGNORE_INDEX].cpu().numpy()
        n = int(math.ceil(fraction * len(classes) - 1e-9))
        chosen = rng.permutation(classes)[:n] if len(classes) else classes
        masks.append(torch.isin(lab, torch.as_tensor(chosen, dtype=lab.dtype, device=lab.device)))
    return torch.stack(masks)


def class_mix(src_rgb, src_depth, src_labels, tgt_rgb, tgt_depth, pseudo, rng: np.random.Generator,
              fraction: float = 0.5):
    """Paste a random half of each source image's classes onto the target.

    Returns (rgb, depth, labels, paste_mask); depth may be None for RGB-only runs.
    """
    paste = class_mix_mask(src_labels, rng, fraction)
    m = paste[:, None]
    rgb = torch.where(m, src_rgb, tgt_rgb)
    depth = torch.where(m, src_depth, tgt_depth) if src_depth is not None else None
    labels = torch.where(paste, src_labels, pseudo)
    return rgb, depth, labels, paste


def _gaussian_kernel(sigma: float, dtype) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable blur with reflect padding, img [C, H, W]."""
    k = _gaussian_kernel(sigma, img.dtype)
    r = len(k) // 2
    c = img.shape[0]
    x = img[None]
    pad_h = min(r, img.shape[-1] - 1)
    pad_v = min(r, img.shape[-2] - 1)
    if pad_h < r or pad_v < r:
        return img
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="reflect"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0, r, r), mode="reflect"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return x[0]


def strong_augment(rgb: torch.Tensor, rng: np.random.Generator, jitter: float = 0.2,
                   blur_sigma=(0.15, 1.15), p_jitter: float = 0.8, p_blur: float = 0.5) -> torch.Tensor:
    """Color jitter and Gaussian blur per image; rgb [B, 3, H, W] in [0, 1]."""
    out = []
    for img in rgb:
        if jitter > 0 and rng.random() < p_jitter:
            b, c, s = rng.uniform(1 - jitter, 1 + jitter, size=3)
            img = img * b
            mean = img.mean()
            img = (img - mean) * c + mean
            gray = img.mean(dim=0, keepdim=True)
            img = (img - gray) * s + gray
            img = img.clamp(0, 1)
        if rng.random() < p_blur:
            img = gaussian_blur(img, float(rng.uniform(*blur_sigma)))
        out.append(img)
    return torch.stack(out)


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean pixel cross-entropy; ignore pixels count as zero loss."""
    ce = F.cross_entropy(logits, labels.long(), ignore_index=IGNORE_INDEX, reduction="none")
    if weight is not None:
        ce = ce * weight
    return ce.mean()


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Owns the student, its EMA teacher, the optimizer and all RNG streams."""

    def __init__(self, cfg: RunConfig, student: SegModel, teacher: TeacherState | None = None):
        self.cfg = cfg
        self.student = student
        self.student.train()
        self.teacher = teacher or TeacherState.from_student(student, cfg.ema_momentum)
        self.groups = self._param_groups()
        self.optimizer = torch.optim.AdamW(
            [{"params": ps, "lr": 0.0, "name": g} for g, ps in self.groups.items() if ps],
            lr=0.0, weight_decay=cfg.weight_decay)
        self.lr_schedule = LrSchedule(
            {"rgb": cfg.lr_rgb, "depth": cfg.lr_depth, "head": cfg.lr_head},
            cfg.warmup_iters, cfg.total_iters, cfg.poly_power)
        self.mask_schedule = MaskSchedule(cfg.ratio_start, cfg.ratio_end, cfg.total_iters)
        self.mask_rng = seeded_rng(cfg.seed, "mask")
        self.mix_rng = seeded_rng(cfg.seed, "mix")
        self.aug_rng = seeded_rng(cfg.seed, "strong_aug")

    def _param_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        groups = {"rgb": [], "depth": [], "head": []}
        for name, p in trainable_parameters(self.student).items():
            if name.startswith("rgb_encoder."):
                groups["rgb"].append(p)
            elif name.startswith("depth_encoder."):
                groups["depth"].append(p)
            else:
                groups["head"].append(p)
        return groups

    def set_lr(self, t: int) -> dict[str, float]:
        t = min(t, self.cfg.total_iters)
        lrs = {}
        for group in self.optimizer.param_groups:
            group["lr"] = lrs[group["name"]] = lr_at(self.lr_schedule, t, group["name"])
        return lrs

    def _forward(self, rgb, depth, mask=None, depth_mask="complement"):
        return self.student(rgb, depth if self.student.uses_depth else None, mask, depth_mask)

    def _masks(self, batch: int, hw, ratio: float):
        mode = self.cfg.masking if self.student.uses_depth else ("rgb" if self.cfg.masking != "none" else "none")
        return sample_masks(mode, batch, hw, self.cfg.block_size_px, ratio, self.mask_rng)

    def train_step(self, batch: Mapping[str, torch.Tensor], t: int) -> dict[str, float]:
        cfg = self.cfg
        src_rgb, src_depth, src_lab = batch["src_rgb"], batch.get("src_depth"), batch["src_labels"]
        tgt_rgb, tgt_depth = batch["tgt_rgb"], batch.get("tgt_depth")
        lrs = self.set_lr(t)
        ratio = ratio_at(self.mask_schedule, min(t, cfg.total_iters))
        hw = tuple(src_rgb.shape[-2:])

        pseudo, conf = pseudo_label(self.teacher, tgt_rgb, tgt_depth, cfg.pseudo_threshold)
        mix_rgb, mix_depth, mix_lab, paste = class_mix(src_rgb, src_depth, src_lab, tgt_rgb, tgt_depth,
                                                       pseudo, self.mix_rng)
        mix_rgb = strong_augment(mix_rgb, self.aug_rng, cfg.color_jitter, (cfg.blur_sigma_min, cfg.blur_sigma_max))
        if cfg.pseudo_weighting:
            mix_w = torch.where(paste, torch.ones_like(paste, dtype=torch.float32),
                                conf[:, None, None].expand_as(paste))
        else:
            mix_w = None

        self.student.train()
        self.optimizer.zero_grad(set_to_none=True)
        parts: dict[str, float] = {}
        total = 0.0
        b = src_rgb.shape[0]
        if cfg.full_batch:
            rgb = torch.cat([src_rgb, mix_rgb])
            depth = torch.cat([src_depth, mix_depth]) if src_depth is not None else None
            logits = self._forward(rgb, depth)
            l_src = weighted_ce(logits[:b], src_lab)
            l_mix = weighted_ce(logits[b:], mix_lab, mix_w)
            full = cfg.loss_weight_full * (l_src + l_mix)
            full.backward()
            parts.update(loss_src=l_src.item(), loss_mix=l_mix.item())
            total += full.item()
        if cfg.mask_src:
            m_rgb, m_depth = self._masks(b, hw, ratio)
            l = weighted_ce(self._forward(src_rgb, src_depth, m_rgb, m_depth), src_lab)
            (cfg.loss_weight_masked * l).backward()
            parts["loss_masked_src"] = l.item()
            total += cfg.loss_weight_masked * l.item()
        if cfg.mask_mix:
            m_rgb, m_depth = self._masks(b, hw, ratio)
            l = weighted_ce(self._forward(mix_rgb, mix_depth, m_rgb, m_depth), mix_lab, mix_w)
            (cfg.loss_weight_masked * l).backward()
            parts["loss_masked_mix"] = l.item()
            total += cfg.loss_weight_masked * l.item()
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss at iteration {t}: {parts}")
        self.optimizer.step()
        ema_update(self.teacher, self.student)
        return {"iter": t, "loss": total, **parts, "mask_ratio": ratio,
                "pseudo_conf": conf.mean().item(), **{f"lr_{k}": v for k, v in lrs.items()}}

    def state(self, iteration: int) -> Checkpoint:
        params = {f"student.{k}": v for k, v in state_dict_to_numpy(self.student.state_dict()).items()}
        params.update({f"teacher.{k}": v for k, v in state_dict_to_numpy(self.teacher.model.state_dict()).items()})
        return Checkpoint(params, self.cfg, iteration)


def model_params_from_checkpoint(ckpt: Checkpoint, which: str = "teacher") -> dict[str, np.ndarray]:
    prefix = which + "."
    out = {k[len(prefix):]: v for k, v in ckpt.params.items() if k.startswith(prefix)}
    return out or dict(ckpt.params)


def load_model_state(model: SegModel, params: Mapping[str, np.ndarray]) -> None:
    sd = model.state_dict()
    missing = sorted(set(sd) - set(params))
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    with torch.no_grad():
        for k, v in sd.items():
            if tuple(v.shape) != tuple(np.shape(params[k])):
                raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {np.shape(params[k])}")
            v.copy_(torch.as_tensor(np.asarray(params[k])))


def run_training(cfg: RunConfig, source, target, student: SegModel | None = None,
                 out_dir=None, evaluate=None) -> Trainer:
    """Full loop: sample batches, step, log JSON lines, write checkpoints.

    ``source``/``target`` are datasets with ``load_batch(indices, rng)``.
    ``evaluate`` is an optional callable(trainer, iteration) -> dict merged into the log.
    """
    torch.manual_seed(int(seeded_rng(cfg.seed, "torch").integers(2**31)))
    student = student or SegModel.from_config(cfg)
    trainer = Trainer(cfg, student)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_rng = seeded_rng(cfg.seed, "data")
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as mf:
        for t in range(cfg.total_iters):
            si = data_rng.integers(len(source), size=cfg.batch_size)
            ti = data_rng.integers(len(target), size=cfg.batch_size)
            sb = source.load_batch(si, data_rng)
            tb = target.load_batch(ti, data_rng)
            batch = {"src_rgb": sb["rgb"], "src_depth": sb["depth"], "src_labels": sb["labels"],
                     "tgt_rgb": tb["rgb"], "tgt_depth": tb["depth"]}
            rec = trainer.train_step(batch, t)
            last = t + 1 == cfg.total_iters
            if cfg.log_every and ((t + 1) % cfg.log_every == 0 or last):
                if evaluate is not None:
                    rec.update(evaluate(trainer, t + 1))
                log.info("iter %d loss %.4f ratio %.3f lr %s", t + 1, rec["loss"], rec["mask_ratio"],
                         {k: f"{v:.2e}" for k, v in rec.items() if k.startswith("lr_")})
                mf.write(json.dumps(rec) + "\n")
                mf.flush()
            if cfg.ckpt_every and (t + 1) % cfg.ckpt_every == 0 and not last:
                save_checkpoint(trainer.state(t + 1), out / f"iter_{t + 1}.ckpt")
    save_checkpoint(trainer.state(cfg.total_iters), out / "latest.ckpt")
    return trainer
