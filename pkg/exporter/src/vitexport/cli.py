"""Command-line entry points: export a directory, or dump one image's matrices."""

from __future__ import annotations

import argparse
import sys

from vitexport import __version__
from vitexport.config import ExportConfig
from vitexport.export import export, export_matrices


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitexport",
        description="Export ViT attention-layer features to .efvp/.efmt files",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="export an image directory to one .efvp file")
    p.add_argument("--model", required=True,
                   help="backbone id: toy:d<dim>-l<layers>-h<heads>[-r<reg>] or a hub name")
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--geo", default=None, help="sidecar CSV (id,lat,lon or id,frame)")
    p.add_argument("--out", required=True, help=".efvp output path")
    p.add_argument("--layer-offset", type=int, default=1)
    p.add_argument("--t1", type=float, default=0.0,
                   help="keypoint score threshold applied at export (0 stores all)")
    p.add_argument("--image-size", type=int, default=504)
    p.set_defaults(run=cmd_export)

    p = sub.add_parser("export-matrices",
                       help="dump one image's token/weight matrices as EFMT files")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--layer-offset", type=int, default=1)
    p.add_argument("--image-size", type=int, default=504)
    p.set_defaults(run=cmd_export_matrices)
    return parser


def cmd_export(args) -> int:
    cfg = ExportConfig(
        model=args.model, image_dir=args.images, geo_sidecar=args.geo,
        layer_offset=args.layer_offset, score_threshold=args.t1,
        image_size=args.image_size,
    )
    out = export(cfg, args.out)
    print(f"wrote {out}")
    return 0


def cmd_export_matrices(args) -> int:
    cfg = ExportConfig(
        model=args.model, image_dir=".", layer_offset=args.layer_offset,
        image_size=args.image_size,
    )
    written = export_matrices(cfg, args.image, args.out_dir)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
