"""Extraction command line: images + (optional) ground truth -> FMAP files
plus a manifest recording model, checkpoint hash, and batch-norm hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .extract import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_RESIZE,
    extract,
    find_images,
    load_query_bboxes,
    locate_image,
    recalibrate_bn,
)
from .models import MODELS, bn_stats_hash, load_model

logger = logging.getLogger("irextract")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irextract",
        description="Extract convolutional feature maps for the retrieval engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract FMAP files from an image directory")
    p.add_argument("--model", required=True, choices=sorted(MODELS))
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--gt", default=None,
                   help="ground-truth JSON; its queries get their own (cropped) maps")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", default=None, help="local checkpoint file")
    p.add_argument("--recalibrate", action="store_true",
                   help="refresh batch-norm statistics on the corpus first")
    p.add_argument("--passes", type=int, default=1, help="recalibration passes")
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--no-crop", action="store_true",
                   help="ignore query bounding boxes")
    p.add_argument("--resize", type=int, default=DEFAULT_RESIZE)
    p.set_defaults(func=cmd_extract)
    return parser


def cmd_extract(args) -> int:
    images = find_images(args.images)
    if not images:
        logger.error("no images found in %s", args.images)
        return 1
    out_dir = Path(args.out)
    db_dir = out_dir / "database"
    db_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model, checkpoint=args.checkpoint)
    bn_before = bn_stats_hash(model.trunk)
    if args.recalibrate:
        bn_hash = recalibrate_bn(
            model, images, passes=args.passes,
            batch_size=args.batch_size, resize=args.resize,
        )
        logger.info("recalibrated batch norm on %d images (%d pass(es))",
                    len(images), args.passes)
    else:
        bn_hash = bn_before
    for i, path in enumerate(images, start=1):
        shape = extract(model, path, db_dir / f"{path.stem}.fmap", resize=args.resize)
        if i == 1 or i % 50 == 0:
            logger.info("[%d/%d] %s -> %s", i, len(images), path.name, shape)
    query_names = []
    if args.gt:
        q_dir = out_dir / "queries"
        q_dir.mkdir(parents=True, exist_ok=True)
        for name, bbox in load_query_bboxes(args.gt).items():
            src = locate_image(args.images, name)
            crop = None if args.no_crop else bbox
            extract(model, src, q_dir / f"{name}.fmap", bbox=crop, resize=args.resize)
            query_names.append(name)
        logger.info("extracted %d query maps", len(query_names))
    if bn_stats_hash(model.trunk) != bn_hash:
        raise RuntimeError("batch-norm statistics drifted during extraction")
    manifest = {
        "model": model.spec.name,
        "channels": model.spec.channels,
        "checkpoint": model.checkpoint,
        "checkpoint_sha256": model.checkpoint_sha256,
        "bn_sha256": bn_hash,
        "recalibrated": bool(args.recalibrate),
        "passes": args.passes if args.recalibrate else 0,
        "resize": args.resize,
        "crop_queries": not args.no_crop,
        "database_images": [p.stem for p in images],
        "query_images": query_names,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("wrote %s", out_dir / "manifest.json")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
