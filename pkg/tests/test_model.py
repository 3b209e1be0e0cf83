import numpy as np
import pytest
import torch

from rgbd_uda.core import RunConfig
from rgbd_uda.masking import sample_mask
from rgbd_uda.model import EncoderSpec, SegModel, load_rgb_weights, trainable_parameters
from rgbd_uda.selftrain import Trainer

W = [8, 8, 16, 16]


def small_model(depth=True, seed=0, **kw):
    torch.manual_seed(seed)
    return SegModel(4, EncoderSpec(W), EncoderSpec(W, in_channels=1) if depth else None, head_width=8, **kw)


def inputs(b=2, hw=(64, 48), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, *hw, generator=g), torch.rand(b, 1, *hw, generator=g)


def test_output_shape_and_strides():
    m = small_model()
    rgb, depth = inputs(hw=(70, 50))
    assert m(rgb, depth).shape == (2, 4, 70, 50)
    pyr = m.rgb_encoder(rgb)
    assert [tuple(f.shape[-2:]) for f in pyr] == [(18, 13), (9, 7), (5, 4), (3, 2)]


def test_eval_is_deterministic():
    m = small_model().eval()
    rgb, depth = inputs()
    assert torch.equal(m(rgb, depth), m(rgb, depth))


def test_zero_initialised_fusion_matches_rgb_only_model():
    rgb_only = small_model(depth=False).eval()
    fused = small_model(depth=True, seed=1)
    load_rgb_weights(fused, {k: v.numpy() for k, v in rgb_only.state_dict().items()}, strict=False)
    fused.fusion.zero_init()
    fused.eval()
    rgb, depth = inputs()
    torch.testing.assert_close(fused(rgb, depth), rgb_only(rgb), atol=1e-6, rtol=0)


def test_masks_rejected_in_eval():
    m = small_model().eval()
    rgb, depth = inputs()
    mask = sample_mask(2, (64, 48), 16, 0.5, np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        m(rgb, depth, mask)


def test_masked_forward_in_train_mode():
    m = small_model().train()
    rgb, depth = inputs()
    mask = sample_mask(2, (64, 48), 16, 0.5, np.random.default_rng(0))
    assert m(rgb, depth, mask).shape == (2, 4, 64, 48)
    assert m(rgb, depth, mask, depth_mask=None).shape == (2, 4, 64, 48)


def test_misaligned_depth_rejected():
    m = small_model()
    rgb, _ = inputs()
    with pytest.raises(ValueError):
        m(rgb, torch.rand(2, 1, 32, 48))
    with pytest.raises(ValueError):
        m(rgb)


def test_load_report_and_strict_mode():
    src = small_model(depth=False)
    sd = {k: v.numpy() for k, v in src.state_dict().items()}
    sd["extra.weight"] = np.zeros(3, np.float32)
    del sd["head.classifier.bias"]
    sd["head.classifier.weight"] = np.zeros((5, 8, 1, 1), np.float32)
    m = small_model()
    report = load_rgb_weights(m, sd)
    assert report.unexpected == ["extra.weight"]
    assert report.missing == ["head.classifier.bias"]
    assert report.mismatched == ["head.classifier.weight"]
    assert torch.equal(m.rgb_encoder.stages[0][0].weight, src.rgb_encoder.stages[0][0].weight)
    with pytest.raises(RuntimeError, match="head.classifier.weight"):
        load_rgb_weights(small_model(), sd, strict=True)


def test_name_map_rewrites_prefixes():
    src = small_model(depth=False)
    sd = {k.replace("rgb_encoder.", "backbone."): v.numpy() for k, v in src.state_dict().items()}
    report = load_rgb_weights(small_model(), sd, name_map={"backbone.": "rgb_encoder."})
    assert not report.unexpected and not report.missing


def test_trainable_parameters_exclude_frozen_rgb():
    m = small_model()
    load_rgb_weights(m, {})
    names = set(trainable_parameters(m))
    assert not any(n.startswith("rgb_encoder.") for n in names)
    expected = sum(p.numel() for n, p in m.named_parameters() if not n.startswith("rgb_encoder."))
    assert sum(p.numel() for p in trainable_parameters(m).values()) == expected
    assert not m.train().rgb_encoder.training


def test_frozen_rgb_unchanged_and_depth_updates_after_steps():
    cfg = RunConfig(num_classes=4, rgb_widths=W, depth_widths=W, head_width=8, total_iters=5, warmup_iters=1,
                    lr_depth=1e-3, lr_head=1e-3, block_size_px=16, input_size=32, freeze_rgb=True)
    m = SegModel.from_config(cfg)
    rgb_before = {k: v.clone() for k, v in m.rgb_encoder.state_dict().items()}
    depth_before = {k: v.clone() for k, v in m.depth_encoder.state_dict().items()}
    trainer = Trainer(cfg, m)
    g = torch.Generator().manual_seed(0)
    for t in range(5):
        batch = {"src_rgb": torch.rand(2, 3, 32, 32, generator=g), "src_depth": torch.rand(2, 1, 32, 32, generator=g),
                 "src_labels": torch.randint(0, 4, (2, 32, 32), generator=g),
                 "tgt_rgb": torch.rand(2, 3, 32, 32, generator=g), "tgt_depth": torch.rand(2, 1, 32, 32, generator=g)}
        trainer.train_step(batch, t + 1)
    for k, v in m.rgb_encoder.state_dict().items():
        assert torch.equal(v, rgb_before[k]), k
    changed = [k for k, v in m.depth_encoder.state_dict().items() if not torch.equal(v, depth_before[k])]
    assert changed


def test_encoder_spec_validation():
    with pytest.raises(ValueError):
        EncoderSpec([8, 4, 16, 16])
    with pytest.raises(ValueError):
        EncoderSpec([8, 8, 16])
