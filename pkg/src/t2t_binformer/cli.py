"""Command line: ``train``, ``infer``, ``eval`` and ``compare``.

Every subcommand also reads an optional ``--config`` file of ``key = value``
lines (keys are flag names); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, thresholding
from .data import (DIRECTIONS, AugmentSpec, DataError, augment, leave_one_out, load_manifest,
                   read_image, tile_256, to_gray, to_rgb, write_binary, write_image)
from .model import PRESETS, predict_image, preset
from .training import (LOG_HEADER, CheckpointError, TrainConfig, Trainer, load_checkpoint,
                       make_samples)

logger = logging.getLogger("t2t_binformer")

MODEL_LABEL = "T2T-BinFormer"


class EmptyDatasetError(DataError):
    pass


class ConfigFileError(ValueError):
    pass


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {s!r}")


def _config_defaults(sub: argparse.ArgumentParser, cfg: dict[str, str]) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise ConfigFileError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, raw in cfg.items():
        action = actions[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            out[key] = _parse_bool(raw)
        elif action.type is not None:
            out[key] = action.type(raw)
        else:
            out[key] = raw
        if action.choices is not None and out[key] not in action.choices:
            raise ConfigFileError(f"{key}: {out[key]!r} is not one of {list(action.choices)}")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    model_cfg = preset(args.preset, args.image_size)
    train_cfg = TrainConfig(lr=args.lr, eps=args.eps, weight_decay=args.weight_decay,
                            batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    datasets = load_manifest(args.manifest)
    train_pairs, _ = leave_one_out(datasets, args.hold_year, args.direction)
    if not train_pairs:
        raise EmptyDatasetError("the training split is empty")

    tiles = [t for p in train_pairs for t in tile_256(p, model_cfg.image_size)]
    if args.augment:
        rng = np.random.default_rng(args.seed)
        spec = AugmentSpec(crop_size=max(1, model_cfg.image_size * 3 // 4), seed=args.seed)
        tiles = [a for t in tiles for a in augment(t, spec, rng)]
    trainer = Trainer(model_cfg, train_cfg, make_samples(tiles, model_cfg))
    steps = args.steps if args.steps is not None else train_cfg.epochs * trainer.batches_per_epoch
    logger.info("training on %d tiles for %d steps", len(tiles), steps)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w") as log:
        log.write(LOG_HEADER)
        trainer.run(steps, log)
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / "model.ckpt"
    trainer.save(ckpt)
    print(f"checkpoint: {ckpt}")
    print(f"loss log: {log_path}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params()
    image = to_rgb(read_image(args.input))
    out = predict_image(image, params, ckpt.model_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    binary_path = Path(args.output_binary) if args.output_binary else out_dir / f"{stem}_binary.png"
    cont_path = Path(args.output_continuous) if args.output_continuous else out_dir / f"{stem}_continuous.png"
    write_binary(binary_path, out.binary)
    write_image(cont_path, out.continuous)
    print(f"binary: {binary_path}")
    print(f"continuous: {cont_path}")
    return 0


def _read_binary(path) -> np.ndarray:
    return (to_gray(read_image(path)) >= 0.5).astype(np.uint8)


def cmd_eval(args) -> int:
    pred, gt = _read_binary(args.pred), _read_binary(args.gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction is {pred.shape[1]}x{pred.shape[0]}, ground truth is {gt.shape[1]}x{gt.shape[0]}")
    for line in metrics.csv_lines(metrics.evaluate_pair(pred, gt)):
        print(line)
    return 0


def cmd_compare(args) -> int:
    datasets = load_manifest(args.manifest)
    pairs = datasets.get(str(args.hold_year), [])
    if not pairs:
        raise EmptyDatasetError(f"no pairs for year {args.hold_year!r} in {args.manifest}")
    rows = []
    for name, method in thresholding.BASELINES.items():
        reports = [metrics.evaluate_pair(method(p.degraded), p.gt) for p in pairs]
        rows.append((name, "Thresh.", metrics.mean_report(reports)))
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        params = ckpt.params()
        reports = [metrics.evaluate_pair(predict_image(p.degraded, params, ckpt.model_cfg).binary, p.gt)
                   for p in pairs]
        rows.append((MODEL_LABEL, "Transformer", metrics.mean_report(reports)))
    table = metrics.format_table(rows, args.format)
    sys.stdout.write(table)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"compare_{args.hold_year}.{args.format}").write_text(table)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="t2t-binformer", description="Document image binarization.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_):
        p = subs.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", help="key = value file; command-line flags override it")
        p.add_argument("--seed", type=int, default=42, help="seed for every random choice")
        return p

    t = sub("train", "train a model on a year-wise split of a manifest")
    t.add_argument("--manifest", required=True, help="year<TAB>degraded<TAB>gt lines")
    t.add_argument("--hold-year", required=True, help="year held out by the split")
    t.add_argument("--direction", choices=DIRECTIONS, default="test-on-one",
                   help="test-on-one trains on the other years; train-on-one trains on the held year only")
    t.add_argument("--preset", choices=PRESETS, default="toy", help="model size")
    t.add_argument("--image-size", type=int, default=256, help="model input tile side")
    t.add_argument("--steps", type=int, default=None, help="optimizer steps (default: epochs x batches)")
    t.add_argument("--epochs", type=int, default=200, help="passes over all training tiles")
    t.add_argument("--batch-size", type=int, default=16, help="tiles per step")
    t.add_argument("--lr", type=float, default=1.5e-4, help="AdamW learning rate")
    t.add_argument("--eps", type=float, default=1e-8, help="AdamW epsilon")
    t.add_argument("--weight-decay", type=float, default=0.05, help="decoupled weight decay")
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="flips, rotations and random crops")
    t.add_argument("--checkpoint", default=None, help="checkpoint path (default: OUT_DIR/model.ckpt)")
    t.add_argument("--out-dir", default="runs", help="directory for the loss log and checkpoint")
    t.set_defaults(func=cmd_train)

    i = sub("infer", "binarize one image with a trained checkpoint")
    i.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    i.add_argument("--input", required=True, help="PNG/PGM/PPM page")
    i.add_argument("--out-dir", default=".", help="directory for the outputs")
    i.add_argument("--output-binary", default=None, help="binary PNG path (default: OUT_DIR/<stem>_binary.png)")
    i.add_argument("--output-continuous", default=None,
                   help="continuous PNG path (default: OUT_DIR/<stem>_continuous.png)")
    i.set_defaults(func=cmd_infer)

    e = sub("eval", "score a binary prediction against ground truth")
    e.add_argument("--pred", required=True, help="predicted binary image")
    e.add_argument("--gt", required=True, help="ground-truth binary image")
    e.set_defaults(func=cmd_eval)

    c = sub("compare", "tabulate thresholding baselines (and a model) on one year")
    c.add_argument("--manifest", required=True, help="year<TAB>degraded<TAB>gt lines")
    c.add_argument("--hold-year", "--year", dest="hold_year", required=True, help="year to evaluate")
    c.add_argument("--checkpoint", default=None, help="optional model checkpoint to add as a row")
    c.add_argument("--format", choices=("md", "csv"), default="md", help="table format")
    c.add_argument("--out-dir", default=None, help="also write the table here")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)

    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            sub.set_defaults(**_config_defaults(sub, read_config(args.config)))
        except (ConfigFileError, OSError, ValueError) as e:
            parser.error(str(e))
        args = parser.parse_args(argv)

    effective = {k: v for k, v in vars(args).items() if k != "func"}
    logger.info("effective config: %s", " ".join(f"{k}={v}" for k, v in sorted(effective.items())))
    try:
        return args.func(args)
    except (DataError, CheckpointError, ConfigFileError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
