"""Command-line entry points: train, eval, make-toy, experiment."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import ConfigError, RunConfig, load_checkpoint
from .data import TOY_CLASSES, DatasetAdapter, ToySpec, make_toy_benchmark
from .experiment import ABLATION, VARIANTS, ExperimentConfig, check_claims, evaluate, format_table, run_experiment
from .model import SegModel, load_rgb_weights
from .selftrain import load_model_state, model_params_from_checkpoint, run_training

log = logging.getLogger("rgbd_uda")


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_name_map(text: str) -> dict[str, str]:
    pairs = [p for p in text.split(",") if p.strip()]
    return dict(p.split(":", 1) for p in pairs)


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, _parse_sets(args.set))
    if not cfg.source_dir or not cfg.target_dir:
        raise ConfigError("train needs source_dir and target_dir in the config")
    source = DatasetAdapter(cfg.source_dir, "train", cfg.num_classes)
    target = DatasetAdapter(cfg.target_dir, "train", cfg.num_classes, with_labels=False)
    model = SegModel.from_config(cfg)
    if cfg.rgb_init:
        ckpt = load_checkpoint(cfg.rgb_init)
        report = load_rgb_weights(model, model_params_from_checkpoint(ckpt, "student"),
                                  name_map=_parse_name_map(cfg.name_map))
        log.info("rgb init: %d loaded, missing %s, unexpected %s", len(report.loaded), report.missing,
                 report.unexpected)
    evaluate_fn = None
    if cfg.val_dir:
        val = DatasetAdapter(cfg.val_dir, "val", cfg.num_classes)

        def evaluate_fn(trainer, it):
            rep = evaluate(trainer.student, val)
            trainer.student.train()
            return {"val_miou": rep.miou, "val_boundary_miou": rep.boundary_miou}
    run_training(cfg, source, target, student=model, out_dir=cfg.out_dir, evaluate=evaluate_fn)
    print(f"wrote {Path(cfg.out_dir) / 'latest.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.config is None:
        raise ConfigError(f"{args.ckpt} carries no run config")
    cfg = ckpt.config
    model = SegModel.from_config(cfg)
    load_model_state(model, model_params_from_checkpoint(ckpt, args.which))
    names = list(TOY_CLASSES) if cfg.num_classes == len(TOY_CLASSES) else None
    data = DatasetAdapter(args.data, args.split, cfg.num_classes)
    report = evaluate(model, data, d=args.boundary_d, class_names=names)
    report.extra = {"checkpoint": str(args.ckpt), "data": str(args.data), "split": args.split,
                    "weights": args.which, "iteration": ckpt.iteration}
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    if args.save_pred:
        out = Path(args.save_pred)
        out.mkdir(parents=True, exist_ok=True)
        model.eval()
        with torch.no_grad():
            for i in range(len(data)):
                b = data.load_batch([i], augmentation=None)
                pred = model(b["rgb"], b["depth"] if model.uses_depth else None).argmax(1)[0]
                Image.fromarray(pred.numpy().astype(np.uint8)).save(out / f"{i:05d}.png")
    return 0


def cmd_make_toy(args) -> int:
    spec = ToySpec.from_file(args.spec) if args.spec else ToySpec()
    paths = make_toy_benchmark(spec, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_experiment(args) -> int:
    toy = ToySpec.from_file(args.spec) if args.spec else ToySpec(image_size=64)
    exp = ExperimentConfig(out_dir=args.out, seeds=args.seeds, variants=args.variants, iters=args.iters,
                           pretrain_iters=args.pretrain_iters, toy=toy,
                           overrides=RunConfig.parse_values(_parse_sets(args.set)))
    doc = run_experiment(exp)
    print(format_table(doc["summary"]))
    checks = check_claims(doc["summary"])
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbd-uda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run self-training from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics JSON report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset root with <split>.txt manifest")
    e.add_argument("--split", default="val")
    e.add_argument("--boundary-d", type=float, default=0.005)
    e.add_argument("--which", choices=("student", "teacher"), default="student")
    e.add_argument("--out")
    e.add_argument("--save-pred", metavar="DIR", help="also write predicted label PNGs")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-toy", help="write the synthetic source/target RGB-D datasets")
    m.add_argument("--spec", help="toy spec key = value file (defaults if omitted)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_toy)

    x = sub.add_parser("experiment", help="toy UDA comparison of baselines and ablations")
    x.add_argument("--out", default="runs/toy_experiment")
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(ABLATION))
    x.add_argument("--iters", type=int, default=2000)
    x.add_argument("--pretrain-iters", type=int, default=2000)
    x.add_argument("--spec", help="toy spec file")
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a run config key")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
