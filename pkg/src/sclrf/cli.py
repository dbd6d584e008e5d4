"""Command-line entry point.

Subcommands: train, sweep, compare, bdrate, payload, scene preview.
Exit codes: 0 success, 2 configuration error, 3 codec backend unavailable.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .checkpoint import load_named_tensors
from .codec import CodecUnavailableError, codec_availability
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import PayloadReport, bd_rate, payload_estimate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CODEC = 3


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed,
                      train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sclrf",
        description="Codec-in-the-loop training for tri-plane radiance fields")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "pretrain + finetune from a config"),
                            ("sweep", "rate-distortion sweep"),
                            ("compare", "SCL vs codec-agnostic baseline")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("bdrate", help="BD-rate between two rd_points.csv files")
    p.add_argument("anchor_csv")
    p.add_argument("test_csv")

    p = sub.add_parser("payload", help="decoder-payload report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--q-bits", type=int, default=8)
    p.add_argument("--out", help="write the CSV here instead of stdout")

    p = sub.add_parser("scene", help="scene utilities")
    scene_sub = p.add_subparsers(dest="scene_command", required=True)
    pv = scene_sub.add_parser("preview", help="emit ground-truth images")
    _add_common(pv)

    return parser


def _require_codec(cfg: ExperimentConfig) -> None:
    if not codec_availability(cfg.train.codec):
        raise CodecUnavailableError(
            f"codec backend unavailable: {cfg.train.codec.describe()}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags, matching the config-error code
        return int(e.code) if e.code else EXIT_OK

    try:
        if args.command == "train":
            cfg = _load(args)
            _require_codec(cfg)
            harness.run_train(cfg)
        elif args.command == "sweep":
            cfg = _load(args)
            _require_codec(cfg)
            harness.run_rd_sweep(cfg)
        elif args.command == "compare":
            cfg = _load(args)
            _require_codec(cfg)
            harness.compare_scl_vs_ca(cfg)
        elif args.command == "bdrate":
            anchor = harness.read_rd_csv(args.anchor_csv)
            test = harness.read_rd_csv(args.test_csv)
            print(f"{bd_rate(anchor, test):.2f}%")
        elif args.command == "payload":
            report = PayloadReport([
                payload_estimate(name, values, args.q_bits)
                for name, values in sorted(load_named_tensors(args.checkpoint).items())
            ])
            csv_text = report.to_csv()
            if args.out:
                Path(args.out).write_text(csv_text)
            else:
                sys.stdout.write(csv_text)
        elif args.command == "scene":
            cfg = _load(args)
            out_dir = Path(args.out) if args.out else Path(cfg.out_dir) / "previews"
            harness.dump_scene_previews(cfg, out_dir)
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command}")
    except CodecUnavailableError as e:
        print(f"error[codec-unavailable]: {e}", file=sys.stderr)
        return EXIT_CODEC
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
