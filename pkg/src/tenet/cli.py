"""Command-line entry point: ``tenet gen-data | train | infer | eval``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from tenet.config import ConfigError, read_config_file, split_config
from tenet.data import DatasetLayoutError, FlowFormatError, generate_synthetic_dataset
from tenet.harness import (
    DEFAULT_MAX_ONLINE_ITERS,
    ONLINE_MODES,
    CheckpointError,
    TrainingDiverged,
    load_checkpoint,
    predict_dataset,
    train,
)
from tenet.metrics import evaluate_dataset

# Failures reported as "error: ..." with exit status 1; argparse exits with 2 on usage errors.
EXPECTED_ERRORS = (
    ConfigError,
    CheckpointError,
    DatasetLayoutError,
    FlowFormatError,
    TrainingDiverged,
    FileNotFoundError,
    ValueError,
)


def _configs(args, **overrides):
    values = read_config_file(args.config) if args.config else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return split_config(values, seed=args.seed)


def cmd_gen_data(args):
    train_cfg, spec = _configs(args)
    out = Path(args.out or train_cfg.data_root)
    manifest = generate_synthetic_dataset(spec, out)
    print(f"wrote {len(manifest.clips)} clips to {out}")


def cmd_train(args):
    train_cfg, _ = _configs(args, out_dir=args.out, data_root=args.data)
    result = train(train_cfg)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log: {result.log_path}")


def cmd_infer(args):
    record = load_checkpoint(args.ckpt)
    data = args.data or record.train_config.data_root
    written = predict_dataset(record, data, args.out, args.online_iters, args.mode, args.max_iters)
    print(f"wrote {sum(written.values())} maps for {len(written)} clips to {args.out}")


def cmd_eval(args):
    report = evaluate_dataset(args.pred, args.gt)
    if not report.clips:
        raise DatasetLayoutError(f"no ground-truth masks under {args.gt}")
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_csv())


def build_parser():
    parser = argparse.ArgumentParser(prog="tenet", description="Train and run a video saliency model with cross-branch excitation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value file with TrainConfig / DatasetSpec fields")
        p.add_argument("--seed", type=int, help="overrides $TENET_SEED and the config file")

    p = sub.add_parser("gen-data", help="write a synthetic moving-shapes dataset")
    with_config(p)
    p.add_argument("--out", help="dataset directory (default: data_root from the config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoints plus loss logs")
    with_config(p)
    p.add_argument("--data", help="dataset root for all three sample kinds")
    p.add_argument("--out", help="run directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for every clip of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset root (default: the one the checkpoint was trained on)")
    p.add_argument("--out", required=True, help="prediction directory, mirrors the dataset layout")
    p.add_argument("--online-iters", type=int, default=0)
    p.add_argument("--mode", choices=ONLINE_MODES, default="both", help="which excitation maps online rounds replace")
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ONLINE_ITERS)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="also write the report as CSV")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
