"""``sfmsemval`` command line.

Exit codes: 0 success, 1 invalid input or usage, 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sqlite3
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .camera_geometry import ChiralityError
from .filters import consistency_filter, model_stats, motion_filter
from .model_io import (MatchDatabaseError, ModelFormatError, SparseModel, check_integrity, load_match_matrix,
                       load_model, write_model_text)
from .planes import (OCCLUDED, PlaneError, export_ply, extract_semantic_planes, occlusion_filter, read_planes,
                     write_planes, write_verdicts_csv)
from .report import ConfigError, PipelineConfig, ValidationReport, load_config, render_report, render_stats
from .semantics import (LabelError, export_labeled_csv, label_model, load_label_dir, load_palette,
                        resolve_class_table, write_observations_csv)

log = logging.getLogger("sfmsemval")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
INPUT_ERRORS = (ModelFormatError, LabelError, ConfigError, PlaneError, MatchDatabaseError, ChiralityError,
                OSError, sqlite3.Error)
COMMANDS = ("stats", "label", "export-csv", "motion-filter", "consistency-filter", "occlusion", "match-matrix",
            "pipeline")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file; flags override it")
    p.add_argument("--model-dir", help="sparse model directory (cameras/images/points3D)")
    p.add_argument("--format", choices=["auto", "text", "binary"])
    p.add_argument("--out", help="output directory (or file for single-output commands)")
    p.add_argument("-v", "--verbose", action="store_true")


def _labels(p: argparse.ArgumentParser) -> None:
    p.add_argument("--labels-dir", help="directory of per-image label rasters, named after the images")
    p.add_argument("--label-scale", type=float, help="label-map / image resolution ratio (default: per image)")
    p.add_argument("--label-policy", choices=["strict", "skip"])
    p.add_argument("--palette", help="colour palette file for RGB segmentations")
    p.add_argument("--class-table", help="class table file or preset (cityscapes, compact)")


def _occlusion(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=float, help="plane inlier distance, scene units")
    p.add_argument("--trials", type=int, help="plane RANSAC trials")
    p.add_argument("--seed", type=int)
    p.add_argument("--min-inliers", type=int)
    p.add_argument("--depth-margin", type=float)
    p.add_argument("--extent-margin", type=float)
    p.add_argument("--aggregation", type=float, help="fraction of occluded rays that marks a point erroneous")
    p.add_argument("--planes", help="plane file to use instead of fitting")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfmsemval", description="Semantic validation of sparse SfM models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("stats", help="model statistics")
    _common(p)

    for name, text in (("label", "label every track observation"),
                       ("export-csv", "labelled points CSV, one row per observation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _labels(p)

    p = sub.add_parser("motion-filter", help="remove points of dynamic classes")
    _common(p)
    _labels(p)
    p.add_argument("--policy", choices=["majority", "any"])

    p = sub.add_parser("consistency-filter", help="enforce one class per track")
    _common(p)
    _labels(p)
    p.add_argument("--min-track", type=int)

    p = sub.add_parser("occlusion", help="flag points seen through opaque planes")
    _common(p)
    _labels(p)
    _occlusion(p)

    p = sub.add_parser("match-matrix", help="image-by-image match counts from a feature database")
    p.add_argument("--database", required=True)
    p.add_argument("--source", choices=["matches", "two_view_geometries"], default="matches")
    p.add_argument("--out", help="CSV file (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("pipeline", help="label, filter, fit planes and check occlusion")
    _common(p)
    _labels(p)
    _occlusion(p)
    p.add_argument("--policy", choices=["majority", "any"])
    p.add_argument("--min-track", type=int)
    p.add_argument("--order", choices=["motion-first", "consistency-first"])
    return parser


def make_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    keys = set(asdict(cfg)) & set(vars(args))
    cfg = cfg.updated(**{k: getattr(args, k) for k in keys})
    return cfg.validate()


def _require(cfg: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(cfg: PipelineConfig) -> SparseModel:
    _require(cfg, "model_dir")
    model = load_model(cfg.model_dir, cfg.format)
    for w in model.warnings:
        log.warning(w)
    return model


def _observations(cfg: PipelineConfig, model: SparseModel):
    _require(cfg, "labels_dir")
    table = resolve_class_table(cfg.class_table)
    palette = load_palette(cfg.palette) if cfg.palette else None
    maps = load_label_dir(cfg.labels_dir, table, palette)
    return table, label_model(model, maps, table, cfg.label_scale, cfg.label_policy)


def _out_dir(cfg: PipelineConfig) -> Optional[Path]:
    if cfg.out is None:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_reports(report: ValidationReport, out: Optional[Path]) -> None:
    report.check()
    sys.stdout.write(render_report(report, "text"))
    if out is not None:
        for fmt, name in (("text", "report.txt"), ("json", "report.json"), ("csv", "report.csv")):
            (out / name).write_text(render_report(report, fmt), encoding="utf-8")


def _filtered_output(model: SparseModel, out: Optional[Path]) -> None:
    if out is not None:
        write_model_text(model, out / "model")


def _new_report(cfg: PipelineConfig, command: str) -> ValidationReport:
    return ValidationReport(config={"command": command, **cfg.to_dict()}, seed=cfg.seed,
                            provenance={"started": datetime.now(timezone.utc).isoformat(), "version": __version__})


def _finish(report: ValidationReport) -> ValidationReport:
    report.provenance["finished"] = datetime.now(timezone.utc).isoformat()
    return report


def cmd_stats(cfg: PipelineConfig) -> None:
    model = _load(cfg)
    stats = model_stats(model)
    sys.stdout.write(render_stats(stats))
    out = _out_dir(cfg)
    if out is not None:
        report = _finish(_new_report(cfg, "stats"))
        report.initial = report.final = stats
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")


def cmd_label(cfg: PipelineConfig, export: bool) -> None:
    model = _load(cfg)
    table, obs = _observations(cfg, model)
    name = "labeled_points.csv" if export else "observations.csv"

    def emit(stream):
        if export:
            export_labeled_csv(obs, model, table, stream)
        else:
            write_observations_csv(obs, stream)

    if cfg.out is None:
        emit(sys.stdout)
    else:
        target = Path(cfg.out)
        if target.suffix.lower() != ".csv":
            target.mkdir(parents=True, exist_ok=True)
            target = target / name
        with open(target, "w", encoding="utf-8", newline="") as fh:
            emit(fh)
        log.info("wrote %d rows to %s", len(obs), target)


def _run_stage(stage: str, cfg: PipelineConfig, model: SparseModel, table, obs):
    if stage == "motion":
        return motion_filter(model, obs, table, cfg.policy, strict=cfg.label_policy == "strict")
    return consistency_filter(model, obs, cfg.min_track, strict=cfg.label_policy == "strict")


def cmd_filter(cfg: PipelineConfig, stage: str) -> None:
    model = _load(cfg)
    table, obs = _observations(cfg, model)
    report = _new_report(cfg, f"{stage}-filter")
    report.initial = model_stats(model)
    model, stage_report = _run_stage(stage, cfg, model, table, obs)
    report.stages.append(stage_report)
    report.final = model_stats(model)
    out = _out_dir(cfg)
    _filtered_output(model, out)
    _write_reports(_finish(report), out)


def _occlusion_stage(cfg: PipelineConfig, model: SparseModel, table, obs, out: Optional[Path], report):
    if cfg.planes:
        planes = read_planes(cfg.planes)
    else:
        planes = extract_semantic_planes(model, obs, table, eps=cfg.eps, min_inliers=cfg.min_inliers,
                                         trials=cfg.trials, rng_seed=cfg.seed)
    filtered, result = occlusion_filter(model, planes, depth_margin=cfg.depth_margin,
                                        extent_margin=cfg.extent_margin, aggregation=cfg.aggregation)
    report.stages.append(result.report)
    n_occ = sum(v.status == OCCLUDED for v in result.verdicts)
    report.occlusion = {
        "planes": len(planes),
        "opaque_planes": sum(p.opaque for p in planes),
        "rays": len(result.verdicts),
        "occluded_rays": n_occ,
        "erroneous_points": len(result.erroneous),
        "depth_margin": result.depth_margin,
    }
    if out is not None:
        with open(out / "planes.txt", "w", encoding="utf-8") as fh:
            write_planes(planes, fh)
        with open(out / "verdicts.csv", "w", encoding="utf-8", newline="") as fh:
            write_verdicts_csv(result.verdicts, fh)
        export_ply(model, out / "cloud.ply", {p: 1 for p in result.erroneous})
    return filtered


def cmd_occlusion(cfg: PipelineConfig) -> None:
    model = _load(cfg)
    if cfg.planes:
        table, obs = resolve_class_table(cfg.class_table), []
    else:
        table, obs = _observations(cfg, model)
    out = _out_dir(cfg)
    report = _new_report(cfg, "occlusion")
    report.initial = model_stats(model)
    model = _occlusion_stage(cfg, model, table, obs, out, report)
    report.final = model_stats(model)
    _filtered_output(model, out)
    _write_reports(_finish(report), out)


def cmd_pipeline(cfg: PipelineConfig) -> None:
    model = _load(cfg)
    check_integrity(model)
    table, obs = _observations(cfg, model)
    out = _out_dir(cfg)
    if out is not None:
        with open(out / "labeled_points.csv", "w", encoding="utf-8", newline="") as fh:
            export_labeled_csv(obs, model, table, fh)
    report = _new_report(cfg, "pipeline")
    report.initial = model_stats(model)
    order = ("motion", "consistency") if cfg.order == "motion-first" else ("consistency", "motion")
    for stage in order:
        model, stage_report = _run_stage(stage, cfg, model, table, obs)
        report.stages.append(stage_report)
    model = _occlusion_stage(cfg, model, table, obs, out, report)
    check_integrity(model)
    report.final = model_stats(model)
    _filtered_output(model, out)
    _write_reports(_finish(report), out)


def cmd_match_matrix(args: argparse.Namespace) -> None:
    matrix = load_match_matrix(args.database, args.source)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            matrix.write_csv(fh)
    else:
        matrix.write_csv(sys.stdout)


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "match-matrix":
        return cmd_match_matrix(args)
    cfg = make_config(args)
    if args.command == "stats":
        cmd_stats(cfg)
    elif args.command in ("label", "export-csv"):
        cmd_label(cfg, export=args.command == "export-csv")
    elif args.command == "motion-filter":
        cmd_filter(cfg, "motion")
    elif args.command == "consistency-filter":
        cmd_filter(cfg, "consistency")
    elif args.command == "occlusion":
        cmd_occlusion(cfg)
    elif args.command == "pipeline":
        cmd_pipeline(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        dispatch(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
