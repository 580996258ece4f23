"""Command line for the feature exporter: export and verify."""

from __future__ import annotations

import argparse
import sys

from .export import ExporterConfig, export, verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adft-export",
                                     description="CNN feature maps -> ADFT files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract features for an image folder")
    p.add_argument("--input", required=True, help="directory with per-class subfolders")
    p.add_argument("--output", required=True)
    p.add_argument("--backbone", default="efficientnet_b5")
    p.add_argument("--layer", type=int, default=36,
                   help="cumulative MBConv block index (36 = the 304-channel stage)")
    p.add_argument("--scales", default="256,192,128,64",
                   help="comma-separated input sizes")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--weights", choices=["pretrained", "random"], default="pretrained",
                   help="'random' keeps shapes testable without downloads")
    p.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="re-check an exported dataset")
    v.add_argument("--manifest", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "export":
        cfg = ExporterConfig(
            input_dir=args.input,
            output_dir=args.output,
            backbone=args.backbone,
            layer_index=args.layer,
            scales=tuple(int(s) for s in args.scales.split(",")),
            batch_size=args.batch_size,
            weights=args.weights,
            seed=args.seed,
        )
        export(cfg)
        return 0
    violations = verify(args.manifest)
    return 0 if violations == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
