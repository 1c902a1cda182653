"""Command-line orchestration: aggregate feature maps into descriptors,
fit whitening, ensemble models, run retrieval pipelines, and score them.

Options can come from a JSON config file (--config); explicit command-line
flags win over config values. All outputs are deterministic: rerunning a
command with identical inputs produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import aggregation, evaluation, postprocess, ranking, tensor_io

logger = logging.getLogger("irbench")


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _merge_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """Fill unset options from --config; explicit flags keep priority."""
    if not getattr(args, "config", None):
        for key, default in parser_defaults.items():
            if getattr(args, key, None) is None:
                setattr(args, key, default)
        return args
    config = json.loads(Path(args.config).read_text())
    unknown = set(config) - set(parser_defaults)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, default in parser_defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, default))
    return args


def _load_groundtruth(args) -> tensor_io.GroundTruth:
    if args.gt_format == "oxford":
        return tensor_io.parse_oxford_groundtruth(args.gt, strip_prefix=args.strip_prefix)
    return tensor_io.parse_generic_groundtruth(args.gt, strict=args.gt_strict)


def _parse_pca(value) -> list:
    """Parse --pca: an int, 'true', or a comma-separated sweep of those."""
    if isinstance(value, int):
        return [value]
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    if not parts:
        raise ValueError(f"empty --pca value {value!r}")
    dims: list = []
    for part in parts:
        if part.lower() == "true":
            dims.append("true")
        else:
            dim = int(part)
            if dim < 1:
                raise ValueError(f"--pca dimension must be positive, got {dim}")
            dims.append(dim)
    return dims


def _pipeline_overrides(args) -> dict:
    return {
        "aqe_n": args.aqe_n,
        "dba_n": args.dba_n,
        "dba_weighted": args.dba_weighted or None,
        "dfs_k": args.dfs_k,
        "dfs_kq": args.dfs_kq,
        "dfs_alpha": args.dfs_alpha,
        "dfs_gamma": args.dfs_gamma,
        "dfs_tol": args.dfs_tol,
        "dfs_max_iter": args.dfs_max_iter,
        "dfs_mutual": False if args.dfs_union_knn else None,
        "dfs_on_original": args.dfs_on_original or None,
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_aggregate(args) -> int:
    features = Path(args.features)
    files = sorted(features.glob("*.fmap"))
    if not files:
        logger.error("no feature maps found in %s", features)
        return 1
    region_norm = args.rmac_region_norm != "off"

    def process(path: Path) -> np.ndarray:
        try:
            fmap = tensor_io.read_fmap(path)
            if args.downsample:
                fmap = aggregation.downsample(
                    fmap, args.downsample, args.downsample, mode=args.downsample_mode
                )
            return aggregation.rmac(fmap, levels=args.rmac_L, region_norm=region_norm)
        except Exception as exc:
            raise StageError(f"aggregate {path.name}", exc) from exc

    threads = max(1, args.threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(process, files))
    else:
        rows = [process(path) for path in files]
    dims = {row.shape[0] for row in rows}
    if len(dims) != 1:
        raise StageError("aggregate", ValueError(f"mixed descriptor dims {sorted(dims)}"))
    tags = []
    if args.downsample:
        tags.append(f"down{args.downsample}")
    tags.append(f"rmac-L{args.rmac_L}" + ("" if region_norm else "-noregnorm"))
    dset = tensor_io.DescriptorSet(
        tuple(p.stem for p in files), np.vstack(rows), tuple(tags)
    )
    tensor_io.write_dset(dset, args.out)
    logger.info("aggregated %d maps -> %s (dim %d)", len(files), args.out, dset.dim)
    return 0


def cmd_fit_whiten(args) -> int:
    dset = tensor_io.read_dset(args.features)
    dims = _parse_pca(args.pca)
    if len(dims) != 1 or dims[0] == "true":
        raise ValueError("fit-whiten needs a single integer --pca dimension")
    normalized = postprocess.l2_normalize_rows(dset.matrix)
    model = postprocess.fit_whitening(normalized, dims[0], eps=args.eps)
    postprocess.write_whitening(model, args.out)
    logger.info("fit whitening %d -> %d on %d descriptors -> %s",
                model.input_dim, model.output_dim, len(dset), args.out)
    return 0


def cmd_ensemble(args) -> int:
    a = tensor_io.read_dset(args.sets[0])
    b = tensor_io.read_dset(args.sets[1])
    a = a.with_matrix(postprocess.l2_normalize_rows(a.matrix), ("l2",))
    b = b.with_matrix(postprocess.l2_normalize_rows(b.matrix), ("l2",))
    combined = postprocess.ensemble_concat(a, b)
    pca = str(args.pca)
    if pca.lower() in ("none", "true"):
        tensor_io.write_dset(combined, args.out)
        logger.info("ensembled %d descriptors (dim %d, no reduction) -> %s",
                    len(combined), combined.dim, args.out)
        return 0
    d = int(pca)
    if args.whiten_train:
        paths = [p.strip() for p in args.whiten_train.split(",")]
        if len(paths) != 2:
            raise ValueError("--whiten-train needs two comma-separated DSET paths")
        ta = tensor_io.read_dset(paths[0])
        tb = tensor_io.read_dset(paths[1])
        ta = ta.with_matrix(postprocess.l2_normalize_rows(ta.matrix), ("l2",))
        tb = tb.with_matrix(postprocess.l2_normalize_rows(tb.matrix), ("l2",))
        train = postprocess.ensemble_concat(ta, tb)
    else:
        train = combined
    model = postprocess.fit_whitening(
        postprocess.l2_normalize_rows(train.matrix), d, eps=args.eps
    )
    reduced = postprocess.post_process(combined, model)
    tensor_io.write_dset(reduced, args.out)
    logger.info("ensembled %d descriptors -> %s (dim %d)", len(reduced), args.out, reduced.dim)
    return 0


def _eval_one(args, db, queries, gt, pca_dim, suffix) -> evaluation.EvalReport:
    try:
        if pca_dim == "true":
            model = None
        else:
            if args.whiten_train:
                train = tensor_io.read_dset(args.whiten_train)
            else:
                train = db
            model = postprocess.fit_whitening(
                postprocess.l2_normalize_rows(train.matrix), int(pca_dim), eps=args.eps
            )
        db_post = postprocess.post_process(db, model)
        queries_post = postprocess.post_process(queries, model)
    except Exception as exc:
        raise StageError("whitening", exc) from exc
    try:
        spec = ranking.parse_pipeline(args.pipeline, **_pipeline_overrides(args))
        rankings = ranking.run_pipeline(
            spec, queries_post, db_post, threads=max(1, args.threads)
        )
    except Exception as exc:
        raise StageError("pipeline", exc) from exc
    try:
        report = evaluation.evaluate(
            rankings,
            gt,
            protocol=args.protocol,
            trapezoidal=not args.plain_ap,
            mpk_remove_junk=not args.mpk_raw,
        )
    except Exception as exc:
        raise StageError("evaluation", exc) from exc
    if args.rankings_out:
        ranking.write_rankings_tsv(rankings, _suffixed(args.rankings_out, suffix))
    return report


def _suffixed(path: str, suffix: str) -> str:
    if not suffix:
        return path
    p = Path(path)
    return str(p.with_name(p.stem + suffix + p.suffix))


def cmd_eval(args) -> int:
    try:
        db = tensor_io.read_dset(args.features)
        queries = tensor_io.read_dset(args.queries)
        gt = _load_groundtruth(args)
    except Exception as exc:
        raise StageError("load", exc) from exc
    missing = [n for n in gt.database if n not in set(db.names)]
    if missing:
        logger.warning(
            "%d ground-truth database names missing from the descriptor set (e.g. %s)",
            len(missing), missing[:5],
        )
    dims = _parse_pca(args.pca)
    reports = []
    for pca_dim in dims:
        suffix = "" if len(dims) == 1 else f"-pca{pca_dim}"
        report = _eval_one(args, db, queries, gt, pca_dim, suffix)
        reports.append((pca_dim, report))
        out_path = _suffixed(args.out, suffix)
        Path(out_path).write_text(report.to_json())
        logger.info("wrote %s", out_path)
    if len(reports) == 1:
        print(reports[0][1].format_table())
    else:
        header = f"{'pca':>6} {'mAP':>8} {'mp@5':>8} {'mp@10':>8} {'queries':>8}"
        print(header)
        print("-" * len(header))
        for pca_dim, report in reports:
            d = report.to_dict()
            print(
                f"{str(pca_dim):>6} {d['map']:>8.2f} {d['mp5']:>8.2f} "
                f"{d['mp10']:>8.2f} {d['n_queries']:>8d}"
            )
    return 0


def cmd_convert_gt(args) -> int:
    gt = _load_groundtruth(args)
    Path(args.out).write_text(tensor_io.groundtruth_to_json(gt))
    logger.info("wrote %s (%d queries, %d database images)",
                args.out, len(gt.queries), len(gt.database))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags win")
    p.add_argument("--threads", type=int, default=None, help="worker threads")


def _add_gt_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gt", default=None, help="ground-truth path (directory or JSON)")
    p.add_argument("--gt-format", default=None, choices=("oxford", "json"))
    p.add_argument("--strip-prefix", action="store_const", const=True, default=None,
                   help="strip the leading corpus token from query image names")
    p.add_argument("--gt-strict", action="store_const", const=True, default=None,
                   help="require every ground-truth name to be in the database list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irbench",
        description="Instance-retrieval benchmark harness over pre-extracted feature maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_agg = sub.add_parser("aggregate", help="fold FMAP files into a descriptor DSET")
    p_agg.add_argument("--features", default=None, help="directory of *.fmap files")
    p_agg.add_argument("--out", default=None, help="output DSET path")
    p_agg.add_argument("--rmac-L", dest="rmac_L", type=int, default=None)
    p_agg.add_argument("--rmac-region-norm", dest="rmac_region_norm",
                       choices=("on", "off"), default=None)
    p_agg.add_argument("--downsample", type=int, default=None,
                       help="pool larger maps down to this spatial size")
    p_agg.add_argument("--downsample-mode", dest="downsample_mode",
                       choices=("max", "avg"), default=None)
    _add_common(p_agg)
    p_agg.set_defaults(
        func=cmd_aggregate,
        defaults={"features": None, "out": "descriptors.dset", "rmac_L": 3,
                  "rmac_region_norm": "on", "downsample": 0,
                  "downsample_mode": "max", "threads": 1},
    )

    p_fit = sub.add_parser("fit-whiten", help="fit a PCA-whitening model on a DSET")
    p_fit.add_argument("--features", default=None, help="training DSET path")
    p_fit.add_argument("--pca", default=None, help="output dimension")
    p_fit.add_argument("--eps", type=float, default=None)
    p_fit.add_argument("--out", default=None, help="output WHTN path")
    _add_common(p_fit)
    p_fit.set_defaults(
        func=cmd_fit_whiten,
        defaults={"features": None, "pca": postprocess.DEFAULT_PCA_DIM,
                  "eps": postprocess.DEFAULT_EPS, "out": "whitening.whtn", "threads": 1},
    )

    p_ens = sub.add_parser("ensemble", help="concatenate two DSETs and reduce by PCA")
    p_ens.add_argument("sets", nargs=2, help="two DSET paths with identical name sets")
    p_ens.add_argument("--pca", default=None, help="reduced dimension, or 'none' to skip")
    p_ens.add_argument("--eps", type=float, default=None)
    p_ens.add_argument("--whiten-train", dest="whiten_train", default=None,
                       help="two comma-separated DSETs to fit the reduction on")
    p_ens.add_argument("--out", default=None)
    _add_common(p_ens)
    p_ens.set_defaults(
        func=cmd_ensemble,
        defaults={"pca": postprocess.DEFAULT_PCA_DIM, "eps": postprocess.DEFAULT_EPS,
                  "whiten_train": None, "out": "ensemble.dset", "threads": 1},
    )

    p_eval = sub.add_parser("eval", help="run a pipeline and score it")
    p_eval.add_argument("--features", default=None, help="database DSET path")
    p_eval.add_argument("--queries", default=None, help="query DSET path")
    _add_gt_options(p_eval)
    p_eval.add_argument("--protocol", default=None,
                        choices=evaluation.PROTOCOLS)
    p_eval.add_argument("--pca", default=None,
                        help="whitening dim, 'true' for pass-through, or a comma sweep")
    p_eval.add_argument("--eps", type=float, default=None)
    p_eval.add_argument("--whiten-train", dest="whiten_train", default=None,
                        help="fit whitening on this DSET instead of the database")
    p_eval.add_argument("--pipeline", default=None, help='e.g. "G+DBA+AQE+DFS"')
    p_eval.add_argument("--aqe-n", dest="aqe_n", type=int, default=None)
    p_eval.add_argument("--dba-n", dest="dba_n", type=int, default=None)
    p_eval.add_argument("--dba-weighted", dest="dba_weighted",
                        action="store_const", const=True, default=None)
    p_eval.add_argument("--dfs-k", dest="dfs_k", type=int, default=None)
    p_eval.add_argument("--dfs-kq", dest="dfs_kq", type=int, default=None)
    p_eval.add_argument("--dfs-alpha", dest="dfs_alpha", type=float, default=None)
    p_eval.add_argument("--dfs-gamma", dest="dfs_gamma", type=float, default=None)
    p_eval.add_argument("--dfs-tol", dest="dfs_tol", type=float, default=None)
    p_eval.add_argument("--dfs-max-iter", dest="dfs_max_iter", type=int, default=None)
    p_eval.add_argument("--dfs-union-knn", dest="dfs_union_knn",
                        action="store_const", const=True, default=None)
    p_eval.add_argument("--dfs-on-original", dest="dfs_on_original",
                        action="store_const", const=True, default=None)
    p_eval.add_argument("--plain-ap", dest="plain_ap",
                        action="store_const", const=True, default=None)
    p_eval.add_argument("--mpk-raw", dest="mpk_raw",
                        action="store_const", const=True, default=None,
                        help="count precision@k over the raw (junk-included) list")
    p_eval.add_argument("--out", default=None, help="report JSON path")
    p_eval.add_argument("--rankings-out", dest="rankings_out", default=None,
                        help="optional TSV rankings path")
    _add_common(p_eval)
    p_eval.set_defaults(
        func=cmd_eval,
        defaults={
            "features": None, "queries": None, "gt": None, "gt_format": "json",
            "strip_prefix": False, "gt_strict": False, "protocol": "classic",
            "pca": postprocess.DEFAULT_PCA_DIM, "eps": postprocess.DEFAULT_EPS,
            "whiten_train": None, "pipeline": "G",
            "aqe_n": None, "dba_n": None, "dba_weighted": False,
            "dfs_k": None, "dfs_kq": None, "dfs_alpha": None, "dfs_gamma": None,
            "dfs_tol": None, "dfs_max_iter": None, "dfs_union_knn": False,
            "dfs_on_original": False, "plain_ap": False, "mpk_raw": False,
            "out": "report.json", "rankings_out": None, "threads": 1,
        },
    )

    p_conv = sub.add_parser("convert-gt", help="convert ground truth to the JSON schema")
    _add_gt_options(p_conv)
    p_conv.add_argument("--out", default=None)
    _add_common(p_conv)
    p_conv.set_defaults(
        func=cmd_convert_gt,
        defaults={"gt": None, "gt_format": "oxford", "strip_prefix": False,
                  "gt_strict": False, "out": "groundtruth.json", "threads": 1},
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, args.defaults)
        for key in ("features", "queries", "gt", "out"):
            if key in args.defaults and getattr(args, key, None) is None and key != "out":
                raise ValueError(f"missing required option --{key.replace('_', '-')}")
        return args.func(args)
    except StageError as exc:
        logger.error("%s", exc)
        return 1
    except Exception as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
