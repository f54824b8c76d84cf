"""Console entry point for the exporter."""

import argparse

from .export import DEFAULT_LAYER, export_tokens
from .model import BUILTIN_MODEL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-tokens",
        description="Dump attention Q/K tokens and place descriptors from "
                    "an image folder into .vgsb files.")
    parser.add_argument("--images", required=True, help="input image folder")
    parser.add_argument("--out", required=True, help="output folder")
    parser.add_argument("--layer", type=int, default=DEFAULT_LAYER,
                        help="attention block to hook (default %(default)s)")
    parser.add_argument("--model", default=BUILTIN_MODEL,
                        help="model name (default %(default)s)")
    parser.add_argument("--head", type=int, default=None,
                        help="export one head instead of the head average")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = export_tokens(args.images, args.out, layer=args.layer,
                             model_name=args.model, head=args.head)
    print("exported %d images at layer %d (%s) to %s"
          % (len(manifest.images), manifest.layer,
             "head-averaged" if manifest.head_averaged else manifest.hook,
             args.out))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
