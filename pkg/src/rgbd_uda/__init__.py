"""Complementary RGB/depth feature dropout and depth-guided fusion for domain-adaptive segmentation."""

from .core import IGNORE_INDEX, Checkpoint, ConfigError, FeaturePyramid, RunConfig, load_checkpoint, save_checkpoint
from .fusion import DepthGuidedFusion, fuse_pyramids
from .masking import MaskGrid, MaskSchedule, apply_complementary, complement, project_mask, sample_mask
from .metrics import MetricReport, boundary_iou
from .model import SegModel, load_rgb_weights
from .selftrain import TeacherState, Trainer, ema_update, pseudo_label, run_training

__all__ = [
    "IGNORE_INDEX", "Checkpoint", "ConfigError", "FeaturePyramid", "RunConfig", "load_checkpoint",
    "save_checkpoint", "DepthGuidedFusion", "fuse_pyramids", "MaskGrid", "MaskSchedule", "apply_complementary",
    "complement", "project_mask", "sample_mask", "MetricReport", "boundary_iou", "SegModel", "load_rgb_weights",
    "TeacherState", "Trainer", "ema_update", "pseudo_label", "run_training",
]
