"""Evaluation protocols: CAD alignment accuracy and layout precision/recall.

Matching is greedy and one-to-one in both protocols.  Alignment pairs each
prediction with a same-category ground-truth object by ascending
translation error before any threshold is applied; layout corners are
paired by ascending distance within the corner radius.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose9DoF, rot_z, rotation_angle_deg
from .layout import LayoutGraph


@dataclass(frozen=True)
class MetricThresholds:
    translation_max: float = 0.20
    rotation_max_deg: float = 20.0
    scale_max_ratio: float = 0.20
    corner_radius: float = 0.40

    def __post_init__(self):
        for name in ("translation_max", "rotation_max_deg", "scale_max_ratio", "corner_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class AlignmentItem:
    category: str
    pose: Pose9DoF
    model_id: str | None = None


def rotation_error_deg(R_pred, R_gt, symmetry: int = 1) -> float:
    """Geodesic angle, minimized over an ``symmetry``-fold turn about the CAD up axis.

    ``symmetry`` 1 is no reduction; 0 stands for full rotational symmetry
    about the up axis, where only the tilt of that axis counts.
    """
    if symmetry == 1:
        return rotation_angle_deg(R_pred, R_gt)
    if symmetry == 0:
        c = float(np.clip(np.dot(np.asarray(R_pred)[:, 2], np.asarray(R_gt)[:, 2]), -1.0, 1.0))
        return float(np.degrees(np.arccos(c)))
    return min(rotation_angle_deg(R_pred, np.asarray(R_gt) @ rot_z(2 * np.pi * k / symmetry))
               for k in range(symmetry))


def pose_errors(pred: Pose9DoF, gt: Pose9DoF, symmetry: int = 1) -> tuple[float, float, float]:
    """Translation (m), rotation (deg) and worst per-axis relative scale error."""
    dt = float(np.linalg.norm(pred.translation - gt.translation))
    dr = rotation_error_deg(pred.rotation, gt.rotation, symmetry)
    ds = float(np.max(np.abs(pred.scale / gt.scale - 1.0)))
    return dt, dr, ds


@dataclass
class AlignmentReport:
    per_category: dict[str, float]
    counts: dict[str, tuple[int, int]]           # category -> (successes, ground truth)
    class_average: float
    instance_average: float
    matches: list[tuple[int, int, bool]] = field(default_factory=list)   # (pred, gt, success)

    def to_dict(self) -> dict:
        return {"per_category": self.per_category,
                "counts": {k: list(v) for k, v in self.counts.items()},
                "class_average": self.class_average, "instance_average": self.instance_average,
                "matches": [list(m) for m in self.matches],
                "scale_criterion": "per-axis ratio", "matching": "greedy one-to-one by translation"}


def alignment_report_from_counts(counts: dict[str, list[int]], matches=None) -> AlignmentReport:
    per_cat = {c: (s / n if n else 0.0) for c, (s, n) in sorted(counts.items())}
    total_s = sum(s for s, _ in counts.values())
    total_n = sum(n for _, n in counts.values())
    cls_avg = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    return AlignmentReport(per_cat, {c: tuple(v) for c, v in sorted(counts.items())}, cls_avg,
                           total_s / total_n if total_n else 0.0, matches or [])


def alignment_accuracy(pred: list[AlignmentItem], gt: list[AlignmentItem],
                       th: MetricThresholds = MetricThresholds(),
                       symmetry: dict[str, int] | None = None) -> AlignmentReport:
    symmetry = symmetry or {}
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if p.category == g.category:
                dt = float(np.linalg.norm(p.pose.translation - g.pose.translation))
                pairs.append((dt, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for g in gt:
        counts[g.category][1] += 1
    matches = []
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        cat = gt[j].category
        dt, dr, ds = pose_errors(pred[i].pose, gt[j].pose, symmetry.get(cat, 1))
        ok = dt <= th.translation_max and dr <= th.rotation_max_deg and ds <= th.scale_max_ratio
        matches.append((i, j, ok))
        if ok:
            counts[cat][0] += 1
    return alignment_report_from_counts(dict(counts), sorted(matches, key=lambda m: m[1]))


def merge_alignment_reports(reports: list[AlignmentReport]) -> AlignmentReport:
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for r in reports:
        for c, (s, n) in r.counts.items():
            counts[c][0] += s
            counts[c][1] += n
    return alignment_report_from_counts(dict(counts))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

@dataclass
class LayoutReport:
    counts: dict[str, tuple[int, int, int]]      # level -> (correct, predicted, ground truth)

    @staticmethod
    def _ratio(num: int, den: int, empty: float) -> float:
        return num / den if den else empty

    def precision(self, level: str) -> float:
        c, p, g = self.counts[level]
        return self._ratio(c, p, 1.0 if g == 0 else 0.0)

    def recall(self, level: str) -> float:
        c, p, g = self.counts[level]
        return self._ratio(c, g, 1.0)

    def to_dict(self) -> dict:
        return {lvl: {"precision": self.precision(lvl), "recall": self.recall(lvl),
                      "correct": c, "predicted": p, "ground_truth": g}
                for lvl, (c, p, g) in self.counts.items()}


LAYOUT_LEVELS = ("corners", "edges", "quads")


def match_corners(pred, gt, radius: float) -> dict[int, int]:
    """Greedy one-to-one corner matching by ascending distance within ``radius``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        return {}
    D = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    cand = [(D[i, j], i, j) for i, j in zip(*np.nonzero(D <= radius))]
    cand.sort()
    out, used = {}, set()
    for _, i, j in cand:
        if i in out or j in used:
            continue
        out[int(i)] = int(j)
        used.add(j)
    return out


def layout_prf(pred: LayoutGraph, gt: LayoutGraph, th: MetricThresholds = MetricThresholds()) -> LayoutReport:
    m = match_corners(pred.corners, gt.corners, th.corner_radius)
    gt_edges = {tuple(sorted(e)) for e in gt.edges}
    gt_quads = {frozenset(q) for q in gt.quads}
    edge_ok = 0
    for a, b in set(tuple(sorted(e)) for e in pred.edges):
        if a in m and b in m and tuple(sorted((m[a], m[b]))) in gt_edges:
            edge_ok += 1
    quad_ok = 0
    for q in set(frozenset(q) for q in pred.quads):
        if all(v in m for v in q) and frozenset(m[v] for v in q) in gt_quads:
            quad_ok += 1
    return LayoutReport({
        "corners": (len(m), len(pred.corners), len(gt.corners)),
        "edges": (edge_ok, len(set(tuple(sorted(e)) for e in pred.edges)), len(gt_edges)),
        "quads": (quad_ok, len(set(frozenset(q) for q in pred.quads)), len(gt_quads)),
    })


def merge_layout_reports(reports: list[LayoutReport]) -> LayoutReport:
    out = {}
    for lvl in LAYOUT_LEVELS:
        out[lvl] = tuple(int(sum(r.counts[lvl][k] for r in reports)) for k in range(3))
    return LayoutReport(out)


# ---------------------------------------------------------------------------
# Text tables
# ---------------------------------------------------------------------------

def alignment_table(rows: dict[str, AlignmentReport], th: MetricThresholds = MetricThresholds()) -> str:
    """Categories as columns, one row per method; entries in percent."""
    cats = sorted({c for r in rows.values() for c in r.per_category})
    head = ["method"] + cats + ["class avg.", "avg."]
    body = []
    for name, r in rows.items():
        body.append([name] + [f"{100 * r.per_category.get(c, 0.0):.2f}" for c in cats]
                    + [f"{100 * r.class_average:.2f}", f"{100 * r.instance_average:.2f}"])
    return _format_table(head, body,
                         f"alignment accuracy (%): <= {th.translation_max:g} m, <= {th.rotation_max_deg:g} deg,"
                         f" <= {100 * th.scale_max_ratio:g}% per-axis scale")


def layout_table(rows: dict[str, LayoutReport]) -> str:
    head = ["method", "metric", "corners pred.", "edges pred.", "quads pred."]
    body = []
    for name, r in rows.items():
        body.append([name, "Precision"] + [f"{100 * r.precision(l):.2f}" for l in LAYOUT_LEVELS])
        body.append([name, "Recall"] + [f"{100 * r.recall(l):.2f}" for l in LAYOUT_LEVELS])
    return _format_table(head, body, "layout precision / recall (%)")


def _format_table(head: list[str], body: list[list[str]], title: str) -> str:
    widths = [max(len(str(row[k])) for row in [head] + body) for k in range(len(head))]
    def fmt(row):
        return "| " + " | ".join(str(v).ljust(w) if k == 0 else str(v).rjust(w)
                                 for k, (v, w) in enumerate(zip(row, widths))) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([title, sep, fmt(head), sep] + [fmt(r) for r in body] + [sep]) + "\n"
