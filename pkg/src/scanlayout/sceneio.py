"""The JSON scene file shared by every pipeline stage.

One document holds the scene's input (occupancy, observed corners,
correspondences), its ground truth (layout, objects, relations) and an
optional ``prediction`` block written by the pipeline stages.  Occupancy is
stored sparsely as the row-major list of occupied cells.  Floats are
written with ``repr`` precision, so parse -> serialize -> parse is
value-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .align import CorrespondenceSet
from .datagen import Scene, SceneObject, SceneSpec
from .geom import Pose9DoF, VoxelGrid
from .layout import LayoutGraph
from .relations import Relation

SCENE_FORMAT = "scanlayout.scene"
SCENE_VERSION = 1
UNITS = {"length": "m", "angle": "deg"}

_REQUIRED = ("format", "version", "units", "occupancy")
_OPTIONAL = ("spec", "room", "layout", "objects", "relations", "correspondences",
             "observed_corners", "heatmap_sigma", "prediction")
_PREDICTION_KEYS = ("layout", "objects", "relations", "reports")


class SceneFormatError(ValueError):
    pass


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise SceneFormatError(f"{SCENE_FORMAT} v{SCENE_VERSION}: {where} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise SceneFormatError(f"{SCENE_FORMAT} v{SCENE_VERSION}: unknown field(s) {unknown} in {where}")


def occupancy_to_dict(grid: VoxelGrid) -> dict:
    vals = grid.values
    if not np.all((vals == 0) | (vals == 1)):
        raise SceneFormatError("only binary occupancy grids can be stored")
    return {"origin": grid.origin.tolist(), "voxel_size": float(grid.voxel_size),
            "dims": list(grid.dims), "occupied": np.argwhere(vals > 0).tolist()}


def occupancy_from_dict(d: dict) -> VoxelGrid:
    _check_keys(d, ("origin", "voxel_size", "dims", "occupied"), "occupancy")
    dims = tuple(int(v) for v in d["dims"])
    values = np.zeros(dims)
    idx = np.asarray(d["occupied"], dtype=np.int64).reshape(-1, 3)
    if len(idx) and (idx.min() < 0 or np.any(idx.max(axis=0) >= np.array(dims))):
        raise SceneFormatError("occupied cell outside the grid dims")
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(np.asarray(d["origin"], dtype=np.float64), float(d["voxel_size"]), values)


def predicted_object_to_dict(category: str, model_id: str | None, pose: Pose9DoF) -> dict:
    return {"category": category, "model_id": model_id, "pose": pose.to_dict()}


def scene_to_dict(scene: Scene) -> dict:
    d = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "units": dict(UNITS),
        "spec": None if scene.spec is None else scene.spec.to_dict(),
        "room": scene.room,
        "occupancy": occupancy_to_dict(scene.occupancy),
        "layout": scene.layout.to_dict(),
        "observed_corners": np.asarray(scene.observed_corners, dtype=np.float64).tolist(),
        "heatmap_sigma": float(scene.heatmap_sigma),
        "objects": [o.to_dict() for o in scene.objects],
        "relations": [r.to_dict() for r in scene.relations],
        "correspondences": [c.to_dict() for c in scene.correspondences],
    }
    if scene.prediction:
        _check_keys(scene.prediction, _PREDICTION_KEYS, "prediction")
        d["prediction"] = scene.prediction
    return d


def scene_from_dict(d: dict) -> Scene:
    _check_keys(d, _REQUIRED + _OPTIONAL, "scene")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise SceneFormatError(f"{SCENE_FORMAT}: missing field(s) {missing}")
    if d["format"] != SCENE_FORMAT:
        raise SceneFormatError(f"not a scene file (format {d['format']!r})")
    if d["version"] != SCENE_VERSION:
        raise SceneFormatError(f"{SCENE_FORMAT}: unsupported version {d['version']!r}; "
                               f"this reader handles version {SCENE_VERSION}")
    if d["units"] != UNITS:
        raise SceneFormatError(f"units must be {UNITS}, got {d['units']}")
    pred = d.get("prediction") or {}
    _check_keys(pred, _PREDICTION_KEYS, "prediction")
    try:
        spec = None if d.get("spec") is None else SceneSpec.from_dict(d["spec"])
        layout = LayoutGraph.from_dict(d["layout"]) if "layout" in d else LayoutGraph(np.zeros((0, 3)))
        observed = np.asarray(d.get("observed_corners", layout.corners.tolist()),
                              dtype=np.float64).reshape(-1, 3)
        return Scene(
            spec=spec,
            room=d.get("room"),
            occupancy=occupancy_from_dict(d["occupancy"]),
            layout=layout,
            objects=[SceneObject.from_dict(o) for o in d.get("objects", [])],
            relations=[Relation.from_dict(r) for r in d.get("relations", [])],
            correspondences=[CorrespondenceSet.from_dict(c) for c in d.get("correspondences", [])],
            observed_corners=observed,
            heatmap_sigma=float(d.get("heatmap_sigma", 0.15)),
            prediction=pred,
        )
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"malformed scene: {exc!r}") from exc


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_scene(path, scene: Scene) -> None:
    Path(path).write_text(dumps(scene_to_dict(scene)))


def read_scene(path) -> Scene:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return scene_from_dict(d)


def prediction_layout(scene: Scene) -> LayoutGraph | None:
    d = scene.prediction.get("layout")
    return None if d is None else LayoutGraph.from_dict(d)


def prediction_objects(scene: Scene) -> list[tuple[str, str | None, Pose9DoF]] | None:
    objs = scene.prediction.get("objects")
    if objs is None:
        return None
    return [(o["category"], o.get("model_id"), Pose9DoF.from_dict(o["pose"])) for o in objs]


def prediction_relations(scene: Scene) -> list[Relation] | None:
    rels = scene.prediction.get("relations")
    return None if rels is None else [Relation.from_dict(r) for r in rels]
