"""Command-line interface: train, predict, eval, verify.

Configuration is a merged view of built-in defaults, an optional plain-text
`key = value` config file (`#` starts a comment), and command-line flags;
flags win over the file, the file wins over defaults. Keys use dotted names
(model.*, train.*, loss.*, lr.*, data.*). Exit codes: 0 success, 1
validation/input failure, 2 non-finite-loss abort, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (load_dataset, load_image, load_mask, normalize01, resize,
                   split, standardize)
from .errors import (CheckpointError, DomainError, NonFiniteLossError, ShapeError,
                     UsageError, ValidationError)
from .losses import LossConfig, binarize, jaccard_index
from .model import ResUnetPPConfig, build_model
from .optim import LRSchedule
from .trainer import (TrainConfig, checkpoint_load, evaluate, read_checkpoint,
                      train)
from .verify import run_checks
from .viz import save_mask_png, save_overlay_png, save_prob_png

# fraction of foreground pixels above which a tumour is reported present
PRESENCE_FRACTION = 0.001


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValidationError(f"expected one of {options}, got {text!r}")
        return text
    return parse


# key -> (parser, default)
SCHEMA: dict = {
    "model.input_channels": (int, 3),
    "model.base_channels": (int, 16),
    "model.depth": (int, 5),
    "model.input_h": (int, 256),
    "model.input_w": (int, 256),
    "model.aspp_dilations": (_parse_int_list, (1, 2, 4)),
    "model.seed": (int, 0),
    "train.epochs": (int, 60),
    "train.batch_size": (int, 8),
    "train.optimizer": (_choice(("adam", "nadam")), "nadam"),
    "train.initial_lr": (float, 1e-3),
    "train.adam_eps": (float, 1e-8),
    "train.early_stop_patience": (int, 10),
    "train.min_delta": (float, 1e-4),
    "train.seed": (int, 0),
    "loss.smooth_eps": (float, 1e-7),
    "loss.binarize_threshold": (float, 0.5),
    "loss.per_sample": (_parse_bool, False),
    "lr.decay_factor": (float, 0.5),
    "lr.cycles": (int, 10),
    "lr.plateau_patience": (int, 5),
    "lr.plateau_factor": (float, 0.1),
    "lr.min_lr": (float, 1e-6),
    "data.split_seed": (int, 0),
    "data.val_ratio": (float, 0.15),
    "data.test_ratio": (float, 0.15),
    "data.standardize": (_choice(("per_image", "global")), "per_image"),
}

SEED_KEYS = ("model.seed", "train.seed", "data.split_seed")


def parse_config_file(path) -> dict:
    """Read `key = value` lines; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        values[key] = parser(text.strip())
    return values


def resolve_config(args) -> dict:
    """Merge defaults < config file < flags (most specific flag wins)."""
    merged = {key: default for key, (_, default) in SCHEMA.items()}
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    seed = getattr(args, "seed", None)
    if seed is not None:
        for key in SEED_KEYS:
            merged[key] = seed
    for key in SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _model_config(cfg: dict) -> ResUnetPPConfig:
    return ResUnetPPConfig(
        input_channels=cfg["model.input_channels"],
        base_channels=cfg["model.base_channels"],
        depth=cfg["model.depth"],
        input_size=(cfg["model.input_h"], cfg["model.input_w"]),
        aspp_dilations=cfg["model.aspp_dilations"],
        seed=cfg["model.seed"],
    )


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(path, cfg: dict, extra_comments=()) -> None:
    """Resolved run configuration, itself a valid config file."""
    lines = ["# resolved run configuration; reusable via --config"]
    lines += [f"# {comment}" for comment in extra_comments]
    lines += [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = load_dataset(args.data_dir, target_size=(cfg["model.input_h"],
                                                       cfg["model.input_w"]),
                           standardize_mode=cfg["data.standardize"])
    ratios = (1.0 - cfg["data.val_ratio"] - cfg["data.test_ratio"],
              cfg["data.val_ratio"], cfg["data.test_ratio"])
    dataset = split(samples, ratios=ratios, seed=cfg["data.split_seed"])
    print(f"loaded {len(samples)} samples: {len(dataset.train)} train / "
          f"{len(dataset.val)} val / {len(dataset.test)} test")

    model = build_model(_model_config(cfg))
    epochs = cfg["train.epochs"]
    train_cfg = TrainConfig(
        epochs=epochs,
        batch_size=cfg["train.batch_size"],
        optimizer=cfg["train.optimizer"],
        initial_lr=cfg["train.initial_lr"],
        adam_eps=cfg["train.adam_eps"],
        early_stop_patience=cfg["train.early_stop_patience"],
        min_delta=cfg["train.min_delta"],
        checkpoint_path=str(out_dir / "best.ckpt"),
        last_checkpoint_path=str(out_dir / "last.ckpt"),
        seed=cfg["train.seed"],
        conf_extras={
            "split_seed": cfg["data.split_seed"],
            "val_ratio": cfg["data.val_ratio"],
            "test_ratio": cfg["data.test_ratio"],
            "binarize_threshold": cfg["loss.binarize_threshold"],
        },
    )
    schedule = LRSchedule(
        initial_lr=cfg["train.initial_lr"],
        decay_factor=cfg["lr.decay_factor"],
        cycle_length_epochs=max(1, epochs // cfg["lr.cycles"]),
        plateau_patience=cfg["lr.plateau_patience"],
        plateau_factor=cfg["lr.plateau_factor"],
        min_lr=cfg["lr.min_lr"],
    )
    loss_cfg = LossConfig(smooth_eps=cfg["loss.smooth_eps"],
                          binarize_threshold=cfg["loss.binarize_threshold"],
                          per_sample=cfg["loss.per_sample"])

    write_manifest(out_dir / "manifest.txt", cfg,
                   extra_comments=[f"data_dir = {args.data_dir}"])
    model, history = train(model, dataset, train_cfg, loss_cfg=loss_cfg,
                           schedule=schedule, log=print)
    history.to_csv(out_dir / "history.csv")
    best = min(r.val_loss for r in history.records)
    print(f"done: {len(history.records)} epochs, best val_loss={best:.6f}")
    print(f"outputs in {out_dir}: best.ckpt last.ckpt history.csv manifest.txt")
    return 0


def _preprocess_for_model(image_raw, target_size):
    resized = resize(image_raw, target_size, mode="bilinear")
    return resized, standardize(normalize01(resized)).astype(np.float32)


def cmd_predict(args) -> int:
    model, _ = checkpoint_load(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = load_image(args.image)
    resized_raw, net_input = _preprocess_for_model(raw, model.config.input_size)
    probs = model.predict(net_input[None])[0]

    threshold = 0.5
    stored = read_checkpoint(args.model).get("conf/binarize_threshold")
    if stored is not None:
        threshold = float(stored[0])
    pred_bin = binarize(probs, threshold)

    save_prob_png(probs, out_dir / "prob.png")
    save_mask_png(pred_bin, out_dir / "mask.png")

    truth = None
    if args.mask:
        truth_raw = load_mask(args.mask)
        truth = (resize(truth_raw, model.config.input_size, mode="nearest")
                 > 127).astype(np.float32)
        save_overlay_png(resized_raw, truth, pred_bin, out_dir / "overlay.png")
        print(f"iou = {jaccard_index(pred_bin, truth):.6f}")

    present = float(pred_bin.mean()) > PRESENCE_FRACTION
    print(f"tumour present: {'yes' if present else 'no'}")
    print(f"outputs in {out_dir}: prob.png mask.png"
          + (" overlay.png" if truth is not None else ""))
    return 0


def cmd_eval(args) -> int:
    model, _ = checkpoint_load(args.model)
    tensors = read_checkpoint(args.model)
    split_seed = int(tensors["conf/split_seed"][0]) if "conf/split_seed" in tensors else 0
    val_ratio = float(tensors["conf/val_ratio"][0]) if "conf/val_ratio" in tensors else 0.15
    test_ratio = float(tensors["conf/test_ratio"][0]) if "conf/test_ratio" in tensors else 0.15
    threshold = (float(tensors["conf/binarize_threshold"][0])
                 if "conf/binarize_threshold" in tensors else 0.5)

    samples = load_dataset(args.data_dir, target_size=model.config.input_size)
    dataset = split(samples, ratios=(1.0 - val_ratio - test_ratio, val_ratio, test_ratio),
                    seed=split_seed)
    subset = getattr(dataset, args.split)
    if not subset:
        raise ValidationError(f"split {args.split!r} is empty")

    report = evaluate(model, subset, LossConfig(binarize_threshold=threshold))
    out_csv = Path(args.out) if args.out else Path(f"eval_{args.split}.csv")
    report.to_csv(out_csv)
    print(f"samples = {len(report.rows)} ({args.split} split)")
    print(f"mean_loss = {report.mean_loss:.6f}")
    print(f"mean_iou = {report.mean_iou:.6f}")
    print(f"mean_dice = {report.mean_dice:.6f}")
    print(f"mean_pixel_accuracy = {report.mean_pixel_accuracy:.6f}")
    print(f"per-sample metrics written to {out_csv}")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max_error={r.max_error:.3e} (tol {r.tolerance:g})")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; route them through the validation path
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resunetpp",
                     description="Brain-tumour segmentation: train, predict, "
                                 "evaluate, and verify the numerics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_schema_flags(p):
        for key, (parser_fn, _) in SCHEMA.items():
            p.add_argument(f"--{key}", dest=key, type=parser_fn, default=None,
                           metavar="V", help=argparse.SUPPRESS)

    p_train = sub.add_parser("train", help="train a model on an image/mask tree")
    p_train.add_argument("--data-dir", required=True)
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--seed", type=int, default=None,
                         help="sets model, train, and split seeds at once")
    add_schema_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="segment one image with a checkpoint")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--mask", default=None, help="optional ground truth")
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data-dir", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--out", default=None, help="per-sample CSV path")
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the numerical verification suite")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ShapeError, DomainError, CheckpointError,
            UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
