"""Command-line entry points: make-data, pretrain, finetune-encoder, train,
erase, eval.

Every run writes a ``manifest.json`` (resolved config, seeds, versions) next
to its outputs. Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import trainer as trainer_mod
from .features import FeatureExtractor


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texterase",
                                description="Scene text removal toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_in=False, needs_out=True, needs_ckpt=False):
        sp.add_argument("--config", help="config file path (flat key=value)")
        sp.add_argument("--preset", default="nano",
                        help="preset name used when --config is absent")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="config override, repeatable")
        if needs_in:
            sp.add_argument("--in", dest="input", required=True)
        if needs_out:
            sp.add_argument("--out", required=True)
        if needs_ckpt:
            sp.add_argument("--ckpt", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--device", default="cpu")

    sp = sub.add_parser("make-data", help="write a synthetic paired corpus")
    common(sp)
    sp.add_argument("--count", type=int, default=32)

    for name, mode in (("pretrain", "pretrain"),
                       ("finetune-encoder", "finetune"),
                       ("train", "train")):
        sp = sub.add_parser(name)
        common(sp, needs_in=True)
        sp.add_argument("--epochs", type=int, default=2)
        sp.add_argument("--batch-size", type=int, default=4)
        sp.add_argument("--resume", help="checkpoint to resume from")
        sp.add_argument("--init-from", help="checkpoint whose model weights "
                        "initialize this phase")
        sp.set_defaults(mode=mode)

    sp = sub.add_parser("erase", help="run the model over a directory")
    common(sp, needs_in=True, needs_ckpt=True)

    sp = sub.add_parser("eval", help="image metrics of --in vs --gt")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv", action="store_true",
                    help="also print the per-image CSV path")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--device", default="cpu")
    return p


def _resolve_config(args) -> config_mod.ModelConfig:
    cfg = config_mod.load(args.config) if args.config \
        else config_mod.preset(args.preset)
    cfg = config_mod.apply_overrides(cfg, args.set)
    report = config_mod.validate(cfg)
    if report:
        raise SystemExit2("invalid config: " + "; ".join(report))
    return cfg


class SystemExit2(Exception):
    """Usage-level failure (exit code 2)."""


def _write_manifest(out_dir, args, cfg=None, extra=None) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if cfg is not None:
        manifest["config"] = config_mod.dumps(cfg).splitlines()
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _cmd_make_data(args) -> int:
    cfg = _resolve_config(args)
    out = args.out
    for sub in ("image", "label", "mask", "annotation"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    for i in range(args.count):
        s = data_mod.synth_sample(trainer_mod.derive_seed(args.seed, "synth", i),
                                  cfg.input_size)
        name = f"{i:05d}.png"
        data_mod.write_image(os.path.join(out, "image", name), s.image)
        data_mod.write_image(os.path.join(out, "label", name), s.truth)
        data_mod.write_mask(os.path.join(out, "mask", name), s.mask)
        boxes = data_mod._mask_to_boxes(s.mask)
        data_mod.write_annotation(
            os.path.join(out, "annotation", f"{i:05d}.txt"), boxes)
    _write_manifest(out, args, cfg, {"count": args.count})
    print(f"wrote {args.count} samples to {out}")
    return 0


def _load_or_create_state(args, cfg, mode: str) -> trainer_mod.TrainState:
    sched_mode = {"train": "str_linear", "pretrain": "pretrain_step",
                  "finetune": "finetune_cosine"}[mode]
    schedule = trainer_mod.default_schedule(sched_mode, args.epochs)
    if args.resume:
        state = trainer_mod.load_checkpoint(args.resume, device=args.device)
        if args.epochs != state.schedule.epochs:
            state.schedule = trainer_mod.default_schedule(sched_mode,
                                                          args.epochs)
        return state
    state = trainer_mod.TrainState(cfg, schedule, seed=args.seed,
                                   device=args.device)
    if args.init_from:
        prev = trainer_mod.load_checkpoint(args.init_from, device=args.device)
        if prev.cfg != cfg:
            print("warning: checkpoint config differs from requested config",
                  file=sys.stderr)
        state.model.load_state_dict(prev.model.state_dict())
        state.disc.load_state_dict(prev.disc.state_dict())
    return state


def _cmd_train_like(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    state = _load_or_create_state(args, cfg, args.mode)
    if state.cfg != cfg and args.resume:
        print("warning: resumed checkpoint config overrides CLI config",
              file=sys.stderr)
    if args.mode == "train":
        dataset = data_mod.PairedDataset(args.input)
    else:
        dataset = data_mod.PretrainDataset(args.input)
    log = trainer_mod.LossLog(os.path.join(args.out, "loss_log.jsonl"))
    ckpt = os.path.join(args.out, "checkpoint.tensbox")
    trainer_mod.run_training(state, dataset, args.epochs, args.batch_size,
                             log=log, mode=args.mode, checkpoint_path=ckpt)
    _write_manifest(args.out, args, state.cfg,
                    {"epochs": args.epochs, "batch_size": args.batch_size,
                     "checkpoint": ckpt})
    print(f"finished {args.mode}; checkpoint at {ckpt}")
    return 0


def _cmd_erase(args) -> int:
    state = trainer_mod.load_checkpoint(args.ckpt, device=args.device)
    cfg = state.cfg
    os.makedirs(args.out, exist_ok=True)
    names = sorted(n for n in os.listdir(args.input)
                   if n.lower().endswith((".png", ".bmp")))
    state.model.eval()
    for name in names:
        img = data_mod.read_image(os.path.join(args.input, name))
        t = torch.from_numpy(img).permute(2, 0, 1)[None].to(args.device)
        if t.shape[-1] != cfg.input_size or t.shape[-2] != cfg.input_size:
            t = torch.nn.functional.interpolate(
                t, size=(cfg.input_size, cfg.input_size), mode="bilinear",
                align_corners=False)
        with torch.no_grad():
            out = state.model(t, training=False)["image"]
        out = out.clamp(0, 1)[0].permute(1, 2, 0).cpu().numpy()
        data_mod.write_image(os.path.join(args.out, name), out)
    _write_manifest(args.out, args, cfg, {"images": len(names)})
    print(f"erased {len(names)} images into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    report = metrics_mod.evaluate_corpus(args.input, args.gt)
    csv_path = os.path.join(args.out, "metrics.csv")
    metrics_mod.write_csv(report, csv_path)
    text = metrics_mod.summary(report)
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(text + "\n")
    _write_manifest(args.out, args, None, {"images": len(report.names)})
    print(text)
    if args.csv:
        print(f"csv: {csv_path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    handler = {
        "make-data": _cmd_make_data,
        "pretrain": _cmd_train_like,
        "finetune-encoder": _cmd_train_like,
        "train": _cmd_train_like,
        "erase": _cmd_erase,
        "eval": _cmd_eval,
    }[args.command]
    try:
        return handler(args)
    except (SystemExit2, config_mod.UnknownPresetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, FloatingPointError,
            trainer_mod.CheckpointError, config_mod.ConfigFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
