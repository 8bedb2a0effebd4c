"""Pipeline configuration: every stage default in one JSON document.

Values come from three layers: built-in defaults, an optional config file,
and ``--set section.key=value`` command-line overrides, later layers
winning.  The merged result is validated by constructing each owning
module's config object, so a bad value fails at load time.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .metrics import MetricThresholds
from .mpnn import TrainConfig
from .relations import RelationConfig

CONFIG_FORMAT = "scanlayout.config"
CONFIG_VERSION = 1

DEFAULTS = {
    "seed": 0,
    "layout": {
        "nms_threshold": 0.5,
        "nms_radius": 3,
        "planarity_tol": 0.05,
        "edge_threshold": 0.5,
        "quad_threshold": 0.5,
        "feature_scales": [3, 5, 9],
        "distance_clamp": 10.0,
        # "model" scores candidates with trained MLPs; "oracle" labels them
        # against the scene's ground-truth layout
        "acceptance": "model",
        "quad_train_edge_threshold": 0.25,
    },
    "align": {
        "retrieve": True,
        "category_filter": True,
    },
    "relations": {
        "tau_p": 0.2,
        "parallel_tol_deg": 15.0,
        "bin_count": 6,
        "angle_range_deg": 180.0,
        "context_margin": 0.2,
        "message_steps": 1,
        "feature_seed": 0,
    },
    "train": {
        "learning_rate": 0.05,
        "epochs": 40,
        "batch_size": 64,
        "momentum": 0.0,
        "hidden": [128, 128],
        "edge_feature_width": 128,
    },
    "metrics": {
        "translation_max": 0.20,
        "rotation_max_deg": 20.0,
        "scale_max_ratio": 0.20,
        "corner_radius": 0.40,
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    data: dict

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def layout(self) -> dict:
        return self.data["layout"]

    @property
    def align(self) -> dict:
        return self.data["align"]

    def relation_config(self) -> RelationConfig:
        r = self.data["relations"]
        return RelationConfig(r["tau_p"], r["parallel_tol_deg"], int(r["bin_count"]), r["angle_range_deg"])

    @property
    def relations(self) -> dict:
        return self.data["relations"]

    def train_config(self) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(learning_rate=t["learning_rate"], epochs=int(t["epochs"]),
                           batch_size=int(t["batch_size"]), seed=self.seed, momentum=t["momentum"],
                           hidden=tuple(t["hidden"]), edge_feature_width=int(t["edge_feature_width"]))

    def thresholds(self) -> MetricThresholds:
        return MetricThresholds(**self.data["metrics"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _merge(base: dict, over: dict, sources: dict, label: str, prefix: str = "") -> None:
    for key, value in over.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            _merge(base[key], value, sources, label, path + ".")
        else:
            base[key] = value
            sources[path] = label


def _leaf_paths(d: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        if isinstance(v, dict):
            out += _leaf_paths(v, f"{prefix}{k}.")
        else:
            out.append(prefix + k)
    return out


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}``; the value is JSON, or a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _validate(d: dict) -> None:
    lay = d["layout"]
    if not 0.0 < lay["nms_threshold"] < 1.0:
        raise ConfigError("layout.nms_threshold must lie in (0, 1)")
    if int(lay["nms_radius"]) < 1 or lay["nms_radius"] != int(lay["nms_radius"]):
        raise ConfigError("layout.nms_radius must be a positive integer")
    if not lay["planarity_tol"] > 0:
        raise ConfigError("layout.planarity_tol must be positive")
    for name in ("edge_threshold", "quad_threshold", "quad_train_edge_threshold"):
        if not 0.0 <= lay[name] <= 1.0:
            raise ConfigError(f"layout.{name} must lie in [0, 1]")
    if len(lay["feature_scales"]) != 3 or any(int(s) < 1 for s in lay["feature_scales"]):
        raise ConfigError("layout.feature_scales needs three positive window sizes")
    if not lay["distance_clamp"] > 0:
        raise ConfigError("layout.distance_clamp must be positive")
    if lay["acceptance"] not in ("model", "oracle"):
        raise ConfigError("layout.acceptance must be 'model' or 'oracle'")
    for name in ("retrieve", "category_filter"):
        if not isinstance(d["align"][name], bool):
            raise ConfigError(f"align.{name} must be true or false")
    rel = d["relations"]
    if rel["context_margin"] < 0 or int(rel["message_steps"]) < 1:
        raise ConfigError("relations.context_margin must be >= 0 and message_steps >= 1")
    if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")


def load_config(path=None, overrides=()) -> tuple[PipelineConfig, dict[str, str]]:
    """Merge defaults, file and overrides; returns the config and each key's source."""
    data = copy.deepcopy(DEFAULTS)
    sources = {p: "default" for p in _leaf_paths(DEFAULTS)}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        fmt, ver = doc.pop("format", CONFIG_FORMAT), doc.pop("version", CONFIG_VERSION)
        if fmt != CONFIG_FORMAT or ver != CONFIG_VERSION:
            raise ConfigError(f"{p}: unsupported config {fmt!r} version {ver!r}")
        _merge(data, doc, sources, "file")
    for text in overrides:
        _merge(data, parse_override(text), sources, "flag")
    _validate(data)
    cfg = PipelineConfig(data)
    try:
        cfg.relation_config()
        cfg.train_config()
        cfg.thresholds()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, sources


def config_dump(cfg: PipelineConfig, sources: dict[str, str]) -> dict:
    return {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, "config": cfg.to_dict(),
            "sources": dict(sorted(sources.items()))}
