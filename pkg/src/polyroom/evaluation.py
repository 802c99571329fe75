"""Room / Corner / Angle precision, recall and F1, plus room IoU.

Rooms pair up one-to-one by Hungarian assignment on IoU and count as
matched at IoU >= 0.5. Corners pair up within matched room pairs by
Hungarian assignment on Euclidean distance (<= 10 px); a matched corner
is angle-correct when the interior angles at the two corners differ by at
most 5 degrees. All three thresholds are configurable because different
benchmarks pin them differently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatchError, UndefinedIoUError
from .geometry import Floorplan, Polygon, polygon_iou


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    corner_px: float = 10.0
    angle_deg: float = 5.0


@dataclass
class LevelCounts:
    matched: int = 0
    predicted: int = 0
    gt: int = 0

    def precision(self) -> float:
        return self.matched / self.predicted if self.predicted else 0.0

    def recall(self) -> float:
        return self.matched / self.gt if self.gt else 0.0

    def f1(self) -> float:
        p, r = self.precision(), self.recall()
        return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


@dataclass
class MetricsReport:
    room: LevelCounts = field(default_factory=LevelCounts)
    corner: LevelCounts = field(default_factory=LevelCounts)
    angle: LevelCounts = field(default_factory=LevelCounts)
    iou_sum: float = 0.0         # summed best IoU over GT rooms
    iou_rooms: int = 0           # number of GT rooms in the denominator
    config: EvalConfig = field(default_factory=EvalConfig)

    @property
    def room_iou(self) -> float:
        return self.iou_sum / self.iou_rooms if self.iou_rooms else 0.0

    def to_dict(self) -> dict:
        def level(c: LevelCounts):
            return {
                "precision": c.precision(), "recall": c.recall(), "f1": c.f1(),
                "matched": c.matched, "predicted": c.predicted, "gt": c.gt,
            }

        return {
            "room": {**level(self.room), "iou": self.room_iou},
            "corner": level(self.corner),
            "angle": level(self.angle),
            "thresholds": {
                "iou": self.config.iou_thresh,
                "corner_px": self.config.corner_px,
                "angle_deg": self.config.angle_deg,
            },
        }

    def to_text(self) -> str:
        rows = [
            ("room", self.room, f"  iou={self.room_iou:.4f}"),
            ("corner", self.corner, ""),
            ("angle", self.angle, ""),
        ]
        lines = [f"{'level':<8}{'prec':>8}{'rec':>8}{'f1':>8}   counts"]
        for name, c, extra in rows:
            lines.append(
                f"{name:<8}{c.precision():>8.4f}{c.recall():>8.4f}{c.f1():>8.4f}"
                f"   {c.matched}/{c.predicted}p/{c.gt}g{extra}"
            )
        return "\n".join(lines)


def interior_angles_deg(poly: Polygon) -> np.ndarray:
    """Interior angle at every vertex in degrees (reflex corners > 180).

    Assumes the stored clockwise (y-down) orientation.
    """
    v = poly.vertices
    a = np.roll(v, 1, axis=0) - v
    b = np.roll(v, -1, axis=0) - v
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = (a * b).sum(axis=1)
    raw = np.degrees(np.arctan2(cross, dot))
    return (-raw) % 360.0


def _safe_iou(a: Polygon, b: Polygon) -> float:
    try:
        return polygon_iou(a, b)
    except UndefinedIoUError:
        return 0.0


def evaluate(pred, gt: Floorplan, cfg: EvalConfig | None = None) -> MetricsReport:
    """Score one scene's prediction against its ground truth.

    `pred` may be a VectorFloorplan or a plain list of Polygons sharing
    the GT pixel frame.
    """
    cfg = cfg or EvalConfig()
    pred_polys = list(pred.polygons) if hasattr(pred, "polygons") else list(pred)
    if hasattr(pred, "width") and (pred.width != gt.width or pred.height != gt.height):
        raise DimensionMismatchError("prediction and GT use different frames")
    gt_polys = gt.rooms
    rep = MetricsReport(config=cfg)
    rep.room.predicted = len(pred_polys)
    rep.room.gt = len(gt_polys)
    rep.corner.predicted = sum(len(p) for p in pred_polys)
    rep.corner.gt = sum(len(p) for p in gt_polys)
    rep.angle.predicted = rep.corner.predicted
    rep.angle.gt = rep.corner.gt
    rep.iou_rooms = len(gt_polys)

    if not pred_polys:
        return rep

    iou = np.zeros((len(gt_polys), len(pred_polys)))
    for i, g in enumerate(gt_polys):
        for j, p in enumerate(pred_polys):
            iou[i, j] = _safe_iou(g, p)
    rows, cols = linear_sum_assignment(-iou)
    for i, j in zip(rows, cols):
        rep.iou_sum += iou[i, j]
        if iou[i, j] < cfg.iou_thresh:
            continue
        rep.room.matched += 1
        _score_corners(gt_polys[i], pred_polys[j], cfg, rep)
    return rep


def _score_corners(gt_poly: Polygon, pred_poly: Polygon, cfg: EvalConfig,
                   rep: MetricsReport) -> None:
    gv, pv = gt_poly.vertices, pred_poly.vertices
    dist = np.linalg.norm(gv[:, None, :] - pv[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(dist)
    g_ang = interior_angles_deg(gt_poly)
    p_ang = interior_angles_deg(pred_poly)
    for i, j in zip(rows, cols):
        if dist[i, j] > cfg.corner_px:
            continue
        rep.corner.matched += 1
        diff = abs(g_ang[i] - p_ang[j])
        diff = min(diff, 360.0 - diff)
        if diff <= cfg.angle_deg:
            rep.angle.matched += 1


def aggregate_reports(reports) -> MetricsReport:
    """Micro-average: counts are summed, then rates recomputed."""
    reports = list(reports)
    total = MetricsReport(config=reports[0].config if reports else EvalConfig())
    for r in reports:
        for lvl in ("room", "corner", "angle"):
            dst, src = getattr(total, lvl), getattr(r, lvl)
            dst.matched += src.matched
            dst.predicted += src.predicted
            dst.gt += src.gt
        total.iou_sum += r.iou_sum
        total.iou_rooms += r.iou_rooms
    return total


def write_report(report: MetricsReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
