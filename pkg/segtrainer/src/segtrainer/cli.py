"""`segtrainer` command line: train on a paired scan/raster directory, or
run a checkpoint over a scan to emit a prediction raster."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .formats import FormatError
from .predict import predict_file
from .train import TrainConfig, train


def cmd_train(args) -> int:
    config = TrainConfig.from_json(json.loads(Path(args.config).read_text())) \
        if args.config else TrainConfig()
    result = train(args.data, config, out_dir=args.out)
    final = result["loss_curve"][-1]
    print(f"trained {config.epochs} epochs on grid {result['grid']}; "
          f"final loss {final['total']:.4f} -> {args.out}/checkpoint.pt")
    return 0


def cmd_predict(args) -> int:
    grid = predict_file(args.ckpt, args.scan, args.out)
    print(f"prediction on grid {grid} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segtrainer",
                                     description="radar segmentation trainer")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train on paired .psc/.crs files")
    p.add_argument("--data", required=True, help="directory of paired frames")
    p.add_argument("--config", help="JSON TrainConfig overrides")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(fn=cmd_train)
    p = sub.add_parser("predict", help="emit a .crs prediction for a scan")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
