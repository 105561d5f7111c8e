"""Command-line entry points: gen, project, train, refine, eval, export.

Every subcommand takes ``--config`` (YAML, schema = PipelineConfig) plus a
small set of targeted overrides. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import kitti_io, pipeline
from .errors import DataFormatError, NumericError
from .projection import ProjectionConfig, project, write_range_pgm
from .refiner import load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="pipeline config YAML")
    sub.add_argument("--c-u", type=float, dest="c_u", help="background distance cutoff (m)")
    sub.add_argument("--boundary-budget", type=int, help="max boundary-uncertain points")
    sub.add_argument("--n-u", type=int, dest="n_u", help="training sample size per scan")
    sub.add_argument("--knn-k", type=int, help="KNN neighbor count")
    sub.add_argument("--seed", type=int, help="master seed (scene, oracle, selection, training)")
    sub.add_argument("--mode", choices=["oracle", "loaded"], help="coarse probability source")


def _load_config(args) -> pipeline.PipelineConfig:
    if args.config:
        cfg = pipeline.PipelineConfig.from_yaml(args.config)
    else:
        cfg = pipeline.PipelineConfig()
    if args.c_u is not None:
        cfg.selection.c_u = args.c_u
    if args.boundary_budget is not None:
        cfg.selection.boundary_budget = args.boundary_budget
    if args.n_u is not None:
        cfg.selection.n_u = args.n_u
    if args.knn_k is not None:
        cfg.knn.k = args.knn_k
    if args.seed is not None:
        cfg.scene.seed = args.seed
        cfg.oracle.seed = args.seed
        cfg.selection.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.mode is not None:
        cfg.mode = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if getattr(args, "no_knn", False):
        cfg.use_knn = False
    if getattr(args, "no_refiner", False):
        cfg.use_refiner = False
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="rangerefine", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[], help="generate a synthetic corpus")
    gen.add_argument("--out", required=True, help="corpus output directory")
    gen.add_argument("--scans", type=int, default=10, help="number of scans")
    _add_common(gen)

    proj = commands.add_parser("project", help="project one scan to a 16-bit range PGM")
    proj.add_argument("--scan", required=True, help="input .bin scan")
    proj.add_argument("--out", required=True, help="output .pgm path")
    _add_common(proj)

    tr = commands.add_parser("train", help="train the uncertain-point refiner")
    tr.add_argument("--data", required=True, help="corpus directory")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--epochs", type=int, help="override training epochs")
    _add_common(tr)

    rf = commands.add_parser("refine", help="run the full pipeline over a corpus")
    rf.add_argument("--data", required=True, help="corpus directory")
    rf.add_argument("--out", required=True, help="run output directory")
    rf.add_argument("--model", help="refiner checkpoint (omit for KNN-only)")
    rf.add_argument("--no-knn", action="store_true", help="skip KNN (pure back-projection)")
    rf.add_argument("--no-refiner", action="store_true", help="skip the refiner stage")
    _add_common(rf)

    ev = commands.add_parser("eval", help="evaluate predictions against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted .label files")
    ev.add_argument("--gt", required=True, help="directory of ground-truth .label files")
    ev.add_argument("--out", help="optional report output directory")
    _add_common(ev)

    ex = commands.add_parser("export", help="export a labeled cloud as colored PLY")
    ex.add_argument("--scan", required=True, help="input .bin scan")
    ex.add_argument("--labels", required=True, help="label file for the scan")
    ex.add_argument("--out", required=True, help="output .ply path")
    _add_common(ex)
    return parser


def _cmd_gen(args) -> int:
    cfg = _load_config(args)
    stems = pipeline.generate_corpus(args.out, cfg, args.scans)
    print(f"wrote {len(stems)} scans to {args.out}")
    return EXIT_OK


def _cmd_project(args) -> int:
    cfg = _load_config(args)
    cloud = kitti_io.read_point_cloud(args.scan)
    img = project(cloud, cfg.projection)
    write_range_pgm(img, args.out)
    print(
        f"{args.scan}: {len(cloud)} points -> {img.height}x{img.width}, "
        f"{int(img.valid_mask.sum())} valid pixels"
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    _, ckpt = pipeline.run_train(args.data, args.out, cfg)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _cmd_refine(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.model) if args.model else None
    report = pipeline.run_refine(args.data, args.out, cfg, model)
    if "miou" in report:
        print(f"mIoU {report['miou']:.4f}  oACC {report['oacc']:.4f}")
    print(f"labels written under {Path(args.out) / 'predictions'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    report = pipeline.run_eval(args.pred, args.gt, cfg.load_class_map(), args.out)
    for name, value in report["iou"].items():
        print(f"iou.{name} {value:.4f}")
    print(f"mIoU {report['miou']:.4f}")
    print(f"oACC {report['oacc']:.4f}")
    return EXIT_OK


def _cmd_export(args) -> int:
    cfg = _load_config(args)
    class_map = cfg.load_class_map()
    cloud = kitti_io.read_point_cloud(args.scan)
    labels = kitti_io.read_labels(args.labels, class_map)
    if len(labels) != len(cloud):
        raise DataFormatError(
            f"{args.labels}: {len(labels)} labels for {len(cloud)} points"
        )
    pipeline.export_ply(cloud, labels, class_map.palette, args.out, class_map.ignore_class)
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "project": _cmd_project,
    "train": _cmd_train,
    "refine": _cmd_refine,
    "eval": _cmd_eval,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
