"""Command-line entry point: ``scanlayout <subcommand> ...``.

Every subcommand runs one pipeline stage (``run`` chains them) with the
JSON scene file as interchange.  Failures print one JSON error record
``{"file", "stage", "message"}`` on stderr and exit with 1 (usage),
2 (data) or 3 (numerical).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align import CadDatabase, DegenerateGeometryError, read_xyz
from .config import ConfigError, config_dump, load_config
from .datagen import SceneSpec, cad_database, generate_scene, ransac_planes
from .layout import LayoutGraph, export_quad_mesh
from .metrics import (LayoutReport, alignment_report_from_counts, alignment_table, layout_table,
                      merge_layout_reports)
from .mpnn import RelationModels, load_models, save_models
from .pipeline import (LayoutModels, StageError, align_objects, evaluate_prediction, extract_layout,
                       predict_scene_relations, predicted_boxes, run_pipeline, scene_features,
                       train_layout_models, train_relation_models)
from .sceneio import SceneFormatError, dumps, read_scene, write_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("scanlayout")


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, stage: str, message: str, file=None, code: int = EXIT_DATA):
        super().__init__(message)
        self.stage, self.file, self.code = stage, file, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def scene_paths(inputs: list[str]) -> list[Path]:
    """Files as given; directories expand to their sorted ``*.json`` files."""
    out = []
    for s in inputs:
        p = Path(s)
        out += sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not out:
        raise CliError("input", "no scene files found", " ".join(inputs))
    return out


def _read(path: Path, stage: str):
    try:
        return read_scene(path)
    except FileNotFoundError as exc:
        raise CliError(stage, f"file not found: {path}", path) from exc
    except SceneFormatError as exc:
        raise CliError(stage, str(exc), path) from exc


def _load_checkpoint(path, stage: str, needed: tuple[str, ...]):
    if path is None:
        raise CliError(stage, f"--models is required for the {stage} stage", None)
    p = Path(path)
    if not p.is_file():
        raise CliError(stage, f"model file not found: {p}", p)
    try:
        models, _ = load_models(p)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(stage, f"cannot read model checkpoint: {exc}", p) from exc
    missing = [n for n in needed if n not in models]
    if missing:
        raise CliError(stage, f"checkpoint lacks model(s) {missing}", p)
    return models


def _layout_models(path, cfg) -> LayoutModels | None:
    if cfg.layout["acceptance"] == "oracle" and path is None:
        return None
    m = _load_checkpoint(path, "layout", ("edge", "quad"))
    return LayoutModels(m["edge"], m["quad"])


def _relation_models(path) -> RelationModels:
    m = _load_checkpoint(path, "relations", ("f_e", "support_head", "angle_head"))
    return RelationModels(m["f_e"], m["support_head"], m["angle_head"])


def _cad_db(cad_dir) -> CadDatabase | None:
    if cad_dir is None:
        return None
    try:
        return CadDatabase.load(cad_dir)
    except FileNotFoundError as exc:
        raise CliError("align", str(exc), cad_dir) from exc
    except (ValueError, KeyError) as exc:
        raise CliError("align", f"cannot read CAD database: {exc}", cad_dir) from exc


def _with_prediction(scene, **fields):
    pred = dict(scene.prediction)
    pred.update(fields)
    return type(scene)(**{**scene.__dict__, "prediction": pred})


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    base = cfg.seed if args.seed is None else args.seed
    seeds = np.random.SeedSequence(base).generate_state(args.count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(seeds):
        spec = SceneSpec(seed=int(s), corner_jitter=args.jitter, dropout=args.dropout,
                         point_noise=args.point_noise, voxel_size=args.voxel_size,
                         wall_count_range=tuple(args.walls), object_count_range=tuple(args.objects))
        write_scene(out / f"scene_{k:04d}.json", generate_scene(spec, cfg.relation_config()))
    if args.cad_dir:
        cad_database().save(args.cad_dir)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_layout(args, cfg) -> int:
    path = Path(args.scene)
    scene = _read(path, "layout")
    layout = extract_layout(scene, cfg, _layout_models(args.models, cfg))
    write_scene(args.out, _with_prediction(scene, layout=layout.to_dict()))
    if args.obj:
        _write_text(args.obj, export_quad_mesh(layout))
    print(f"{path}: {len(layout.corners)} corners, {len(layout.edges)} edges, {len(layout.quads)} quads")
    return EXIT_OK


def cmd_align(args, cfg) -> int:
    path = Path(args.scene)
    db = _cad_db(args.cad_dir)
    scene = _read(path, "align")
    objects = align_objects(scene, cfg, db)
    write_scene(args.out, _with_prediction(scene, objects=objects))
    print(f"{path}: aligned {len(objects)} objects")
    return EXIT_OK


def cmd_relations(args, cfg) -> int:
    path = Path(args.scene)
    models = _relation_models(args.models)
    scene = _read(path, "relations")
    layout = LayoutGraph.from_dict(scene.prediction["layout"]) if "layout" in scene.prediction \
        else scene.layout
    boxes = predicted_boxes(scene, scene.prediction["objects"]) if "objects" in scene.prediction \
        else scene.obbs()
    quads = [layout.quad_points(k) for k in range(len(layout.quads))]
    try:
        rels = predict_scene_relations(models, boxes, quads, scene_features(scene, cfg), cfg)
    except ValueError as exc:
        raise CliError("relations", str(exc), path) from exc
    write_scene(args.out, _with_prediction(scene, relations=[r.to_dict() for r in rels]))
    print(f"{path}: {len(rels)} relations")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    train = [_read(p, "train") for p in scene_paths(args.scenes)]
    val = [_read(p, "train") for p in scene_paths(args.val)] if args.val else None
    log = {"config": cfg.to_dict()}
    models = {}
    if not args.skip_layout:
        lm, llog = train_layout_models(train, cfg)
        models.update(edge=lm.edge, quad=lm.quad)
        log["layout"] = llog
        for name in ("edge", "quad"):
            losses = llog[name]["losses"]
            print(f"{name}: {llog[name]['samples']} samples, loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    rm, rlog = train_relation_models(train, cfg, val)
    models.update(rm.as_dict())
    log["relations"] = rlog.to_dict()
    for name, losses in rlog.losses.items():
        print(f"{name}: loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    for name, acc in ((n, a) for n, a in rlog.val_accuracy.items() if a):
        print(f"{name}: validation accuracy {acc[-1]:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_models(args.out, models, {"config": cfg.to_dict(), "scenes": len(train)})
    if args.log:
        _write_text(args.log, dumps(log))
    return EXIT_OK


def _merge_reports(reports: list[dict]) -> dict:
    layout = merge_layout_reports([LayoutReport({k: tuple(v) for k, v in r["layout"].items()})
                                   for r in reports if "layout" in r])
    align: dict[str, list[int]] = {}
    rel = {"support": [0, 0], "angle": [0, 0]}
    retrieval = [0, 0]
    for r in reports:
        for c, (s, n) in r.get("alignment", {}).items():
            cur = align.setdefault(c, [0, 0])
            cur[0] += s
            cur[1] += n
        for name, (s, n) in r.get("relations", {}).items():
            rel[name][0] += s
            rel[name][1] += n
        if "retrieval" in r:
            retrieval = [retrieval[0] + r["retrieval"][0], retrieval[1] + r["retrieval"][1]]
    return {"layout": layout, "alignment": alignment_report_from_counts(align), "relations": rel,
            "retrieval": retrieval}


def cmd_eval(args, cfg) -> int:
    reports = []
    for p in scene_paths(args.scenes):
        scene = _read(p, "eval")
        if not scene.prediction:
            raise CliError("eval", "scene has no prediction block", p)
        reports.append(evaluate_prediction(scene, cfg))
    merged = _merge_reports(reports)
    th = cfg.thresholds()
    parts = []
    if any("alignment" in r for r in reports):
        parts.append(alignment_table({args.name: merged["alignment"]}, th))
    if any("layout" in r for r in reports):
        parts.append(layout_table({args.name: merged["layout"]}))
    lines = []
    for name, (s, n) in merged["relations"].items():
        if n:
            lines.append(f"{name} relation accuracy: {100 * s / n:.2f}% ({s}/{n})")
    if merged["retrieval"][1]:
        h, n = merged["retrieval"]
        lines.append(f"CAD retrieval accuracy: {100 * h / n:.2f}% ({h}/{n})")
    if lines:
        parts.append("\n".join(lines) + "\n")
    sys.stdout.write("\n".join(parts))
    if args.json:
        record = {"scenes": len(reports), "alignment": merged["alignment"].to_dict(),
                  "layout": merged["layout"].to_dict(), "relations": merged["relations"],
                  "retrieval": merged["retrieval"]}
        _write_text(args.json, dumps(record))
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    path = Path(args.scene)
    db = _cad_db(args.cad_dir)
    lm = _layout_models(args.models, cfg)
    rm = _relation_models(args.models) if args.models else None
    scene = _read(path, "run")
    out = run_pipeline(scene, cfg, lm, rm, db)
    write_scene(args.out, out)
    reports = out.prediction.get("reports")
    if reports:
        print(dumps(reports), end="")
    return EXIT_OK


def cmd_planes(args, cfg) -> int:
    path = Path(args.points)
    try:
        pts = read_xyz(path)
    except FileNotFoundError as exc:
        raise CliError("planes", f"file not found: {path}", path) from exc
    planes = ransac_planes(pts, args.iterations, args.tol, args.min_inliers, cfg.seed)
    doc = {"planes": [{"normal": p.normal.tolist(), "offset": p.offset, "inliers": len(p.inliers)}
                      for p in planes]}
    if args.out:
        _write_text(args.out, dumps(doc))
    else:
        sys.stdout.write(dumps(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. relations.tau_p=0.25 (repeatable)")
    common.add_argument("--print-config", action="store_true",
                        help="print the merged config with each value's source and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="scanlayout", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"scanlayout {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    p.add_argument("--seed", type=int, help="base seed (default: config seed)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jitter", type=float, default=0.0, help="corner jitter sigma (m)")
    p.add_argument("--dropout", type=float, default=0.0, help="occupancy block dropout fraction")
    p.add_argument("--point-noise", type=float, default=0.0, help="correspondence noise sigma (m)")
    p.add_argument("--voxel-size", type=float, default=0.05)
    p.add_argument("--walls", type=int, nargs=2, default=[4, 6], metavar=("MIN", "MAX"))
    p.add_argument("--objects", type=int, nargs=2, default=[2, 5], metavar=("MIN", "MAX"))
    p.add_argument("--cad-dir", help="also write the CAD database here")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("layout", parents=[common], help="extract the layout graph")
    p.add_argument("scene")
    p.add_argument("--models", help="checkpoint with edge and quad models")
    p.add_argument("--out", required=True)
    p.add_argument("--obj", help="also export the quads as an OBJ mesh")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("align", parents=[common], help="estimate object poses and retrieve CAD models")
    p.add_argument("scene")
    p.add_argument("--cad-dir", help="CAD database directory (default: built-in library)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("relations", parents=[common], help="predict object/layout relations")
    p.add_argument("scene")
    p.add_argument("--models", required=True, help="checkpoint with relation models")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_relations)

    p = sub.add_parser("train", parents=[common], help="train layout and relation models")
    p.add_argument("scenes", nargs="+", help="scene files or directories")
    p.add_argument("--val", nargs="+", help="validation scenes")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log", help="write the per-epoch training log as JSON")
    p.add_argument("--skip-layout", action="store_true", help="train the relation models only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--name", default="ours", help="method name in the tables")
    p.add_argument("--json", help="write the merged report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="all stages on one scene, with reports")
    p.add_argument("scene")
    p.add_argument("--models", help="checkpoint from `train`")
    p.add_argument("--cad-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("planes", parents=[common], help="RANSAC planes from an xyz point file")
    p.add_argument("points")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--tol", type=float, default=0.02)
    p.add_argument("--min-inliers", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_planes)
    return parser


def _error(stage: str, message: str, file=None) -> None:
    rec = {"file": None if file is None else str(file), "stage": stage, "message": message}
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
    except UsageError as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg, sources = load_config(args.config, args.set)
    except FileNotFoundError as exc:
        _error("config", str(exc), args.config)
        return EXIT_USAGE
    except ConfigError as exc:
        _error("config", str(exc), args.config)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(dumps(config_dump(cfg, sources)))
        return EXIT_OK
    file = getattr(args, "scene", None)
    try:
        return args.func(args, cfg)
    except CliError as exc:
        _error(exc.stage, str(exc), exc.file)
        return exc.code
    except StageError as exc:
        _error(exc.stage, str(exc), file)
        return EXIT_NUMERICAL if exc.kind == "numerical" else EXIT_DATA
    except (DegenerateGeometryError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _error(stage, str(exc), file)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as exc:
        _error(stage, f"{type(exc).__name__}: {exc}", file)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
