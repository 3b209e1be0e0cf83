"""Desk-scale UDA comparison on the synthetic RGB-D benchmark.

For every seed an RGB-only model is first adapted with its encoder trainable
(standing in for publicly released UDA weights). Each variant then loads
that encoder and head, freezes the encoder, and trains for the same budget.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import RunConfig, seeded_rng
from .data import TOY_CLASSES, POLE, DatasetAdapter, ToySpec, make_toy_benchmark
from .metrics import MetricReport
from .model import SegModel, load_rgb_weights
from .selftrain import run_training

log = logging.getLogger(__name__)

# desk-scale defaults; iteration-dependent values scaled from a 20k run to 2k
TOY_BASE = dict(
    num_classes=6, input_size=64, block_size_px=16, ratio_start=0.7, ratio_end=0.3,
    rgb_widths=[16, 32, 64, 128], depth_widths=[16, 32, 64, 128], head_width=32,
    lr_rgb=1e-3, lr_depth=1e-3, lr_head=1e-3, warmup_iters=150, total_iters=2000,
    ema_momentum=0.99, batch_size=2, log_every=0,
    # small residual scale so fresh fusion weights barely disturb the pretrained head at the start
    fuse_gamma_init=0.1,
)

VARIANTS: dict[str, dict] = {
    "rgb_only": dict(use_depth=False, masking="none", mask_mix=False),
    "depth_no_mask": dict(masking="none", mask_mix=False),
    "full": dict(masking="complementary", mask_mix=True),
    "independent_mask": dict(masking="independent", mask_mix=True),
    "rgb_mask": dict(masking="rgb", mask_mix=True),
    "per_level_mask": dict(masking="per_level", mask_mix=True),
    "local_only": dict(masking="complementary", mask_mix=True, fusion_mode="local"),
    "global_only": dict(masking="complementary", mask_mix=True, fusion_mode="global"),
}

HEADLINE = ("rgb_only", "depth_no_mask", "full")
ABLATION = ("rgb_only", "depth_no_mask", "full", "independent_mask", "local_only")


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/toy_experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    variants: list[str] = field(default_factory=lambda: list(ABLATION))
    iters: int = 2000
    pretrain_iters: int = 2000
    toy: ToySpec = field(default_factory=lambda: ToySpec(image_size=64))
    overrides: dict = field(default_factory=dict)


@torch.no_grad()
def evaluate(model: SegModel, dataset: DatasetAdapter, batch_size: int = 16, d: float = 0.005,
             class_names=None) -> MetricReport:
    model.eval()
    report = MetricReport(model.num_classes, d, list(class_names) if class_names else None)
    for start in range(0, len(dataset), batch_size):
        b = dataset.load_batch(range(start, min(start + batch_size, len(dataset))), augmentation=None)
        logits = model(b["rgb"], b["depth"] if model.uses_depth else None)
        report.update(logits.argmax(1), b["labels"])
    return report


def base_config(seed: int, iters: int, **changes) -> RunConfig:
    return RunConfig(**{**TOY_BASE, "total_iters": iters, "seed": seed, **changes})


def pretrain_rgb(seed: int, iters: int, source, target, out_dir: Path, **overrides) -> SegModel:
    cfg = base_config(seed, iters, use_depth=False, freeze_rgb=False, masking="none",
                      mask_mix=False, **overrides)
    trainer = run_training(cfg, source, target, out_dir=out_dir)
    return trainer.student


def run_variant(name: str, seed: int, iters: int, rgb_model: SegModel, source, target, out_dir: Path,
                **overrides) -> SegModel:
    cfg = base_config(seed, iters, **{**VARIANTS[name], **overrides})
    # one init stream per seed: variants with the same architecture start from the same weights
    torch.manual_seed(int(seeded_rng(seed, "init").integers(2**31)))
    model = SegModel.from_config(cfg)
    sd = {k: v.numpy() for k, v in rgb_model.state_dict().items()}
    load_rgb_weights(model, sd)
    trainer = run_training(cfg, source, target, student=model, out_dir=out_dir)
    return trainer.student


def _summ(values):
    a = np.asarray(values, np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "values": [float(v) for v in a]}


def run_experiment(exp: ExperimentConfig) -> dict:
    """Train every variant for every seed, evaluate on target val, write results.json."""
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_root = out / "data"
    if not (data_root / "target" / "val.txt").exists():
        make_toy_benchmark(exp.toy, data_root)
    source = DatasetAdapter(data_root / "source", "train")
    target = DatasetAdapter(data_root / "target", "train", with_labels=False)
    val = DatasetAdapter(data_root / "target", "val")
    results: dict[str, dict] = {v: {"miou": [], "boundary_miou": [], "pole_iou": [], "pole_boundary_iou": []}
                                for v in exp.variants}
    timings = {}
    for seed in exp.seeds:
        t0 = time.time()
        rgb = pretrain_rgb(seed, exp.pretrain_iters, source, target, out / f"seed{seed}" / "pretrain_rgb",
                           **exp.overrides)
        timings[f"seed{seed}/pretrain"] = time.time() - t0
        pre = evaluate(rgb, val, class_names=TOY_CLASSES)
        log.info("seed %d pretrained rgb: mIoU %.2f", seed, 100 * pre.miou)
        for name in exp.variants:
            t0 = time.time()
            model = run_variant(name, seed, exp.iters, rgb, source, target, out / f"seed{seed}" / name,
                                **exp.overrides)
            rep = evaluate(model, val, class_names=TOY_CLASSES)
            timings[f"seed{seed}/{name}"] = time.time() - t0
            (out / f"seed{seed}" / name / "report.json").write_text(rep.to_json())
            r = results[name]
            r["miou"].append(100 * rep.miou)
            r["boundary_miou"].append(100 * rep.boundary_miou)
            r["pole_iou"].append(100 * rep.iou[POLE])
            r["pole_boundary_iou"].append(100 * rep.boundary_iou[POLE])
            log.info("seed %d %-16s mIoU %.2f  bIoU %.2f  pole bIoU %.2f  (%.0fs)", seed, name,
                     r["miou"][-1], r["boundary_miou"][-1], r["pole_boundary_iou"][-1], timings[f"seed{seed}/{name}"])
    summary = {name: {k: _summ(v) for k, v in r.items()} for name, r in results.items()}
    doc = {"seeds": exp.seeds, "iters": exp.iters, "pretrain_iters": exp.pretrain_iters,
           "summary": summary, "timings_s": timings}
    (out / "results.json").write_text(json.dumps(doc, indent=2))
    (out / "results.md").write_text(format_table(summary))
    return doc


def format_table(summary: dict) -> str:
    lines = ["| variant | mIoU | boundary mIoU | pole IoU | pole boundary IoU |",
             "|---|---|---|---|---|"]
    for name, s in summary.items():
        cells = [f"{s[k]['mean']:.2f} ± {s[k]['std']:.2f}"
                 for k in ("miou", "boundary_miou", "pole_iou", "pole_boundary_iou")]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def check_claims(summary: dict) -> dict[str, bool]:
    """Directional checks on the mean toy metrics."""
    m = {k: v["miou"]["mean"] for k, v in summary.items()}
    pb = {k: v["pole_boundary_iou"]["mean"] for k, v in summary.items()}
    checks = {}
    if all(k in m for k in HEADLINE):
        checks["full >= rgb_only + 2.0 mIoU"] = m["full"] >= m["rgb_only"] + 2.0
        checks["full >= depth_no_mask + 1.0 mIoU"] = m["full"] >= m["depth_no_mask"] + 1.0
        checks["pole boundary IoU gain >= 3.0"] = pb["full"] >= pb["rgb_only"] + 3.0
    if "independent_mask" in m:
        checks["complementary >= independent >= none"] = (
            m["full"] >= m["independent_mask"] >= m["depth_no_mask"])
    if "local_only" in m:
        checks["local+global >= local"] = m["full"] >= m["local_only"]
    return checks
