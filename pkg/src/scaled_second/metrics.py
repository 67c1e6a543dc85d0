"""Greedy matching, precision/recall envelopes, AP and heading-weighted APH."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .heads import Detection, rotated_iou_one_to_many

DEFAULT_IOU = {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}
_RECALL_EPS = 1e-12


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU))
    recall_points: int = 101

    def __post_init__(self):
        if not self.iou_thresholds:
            raise ValueError("EvalConfig needs at least one class")
        for cls, t in self.iou_thresholds.items():
            if not 0.0 < float(t) <= 1.0:
                raise ValueError(f"IoU threshold for {cls!r} must be in (0, 1], got {t}")
        if int(self.recall_points) < 2:
            raise ValueError(f"recall_points must be >= 2, got {self.recall_points}")

    @property
    def classes(self) -> tuple:
        return tuple(self.iou_thresholds)


@dataclass(frozen=True)
class ClassResult:
    ap: float
    aph: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalReport:
    per_class: dict  # class -> ClassResult, in config order

    @property
    def mAP(self) -> float:
        return sum(r.ap for r in self.per_class.values()) / len(self.per_class)

    @property
    def mAPH(self) -> float:
        return sum(r.aph for r in self.per_class.values()) / len(self.per_class)

    def to_dict(self) -> dict:
        return {"per_class": {k: asdict(v) for k, v in self.per_class.items()},
                "mAP": self.mAP, "mAPH": self.mAPH}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls({k: ClassResult(**v) for k, v in data["per_class"].items()})

    def metric_columns(self) -> dict:
        cols = {}
        for name, r in self.per_class.items():
            cols[f"AP_{name}"] = r.ap
            cols[f"APH_{name}"] = r.aph
        cols["mAP"] = self.mAP
        cols["mAPH"] = self.mAPH
        return cols

    def to_csv(self) -> str:
        cols = self.metric_columns()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow(repr(float(v)) for v in cols.values())
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Outcome of greedy matching for one class.

    ``order`` lists detection indices in processing order; ``det_gt[i]`` is the
    ground-truth index matched by detection ``i`` or -1 for a false positive;
    ``heading[i]`` is the heading weight of a true positive (0 for FPs).
    """
    order: np.ndarray
    det_gt: np.ndarray
    gt_matched: np.ndarray
    heading: np.ndarray

    @property
    def tp(self) -> int:
        return int((self.det_gt >= 0).sum())

    @property
    def fp(self) -> int:
        return int((self.det_gt < 0).sum())

    @property
    def fn(self) -> int:
        return int((~self.gt_matched).sum())


def heading_weight(det_yaw, gt_yaw):
    """1 - d/pi where d is the absolute angular difference folded into [0, pi]."""
    d = np.mod(np.abs(np.asarray(det_yaw, np.float64) - np.asarray(gt_yaw, np.float64)), 2 * math.pi)
    d = np.minimum(d, 2 * math.pi - d)
    return 1.0 - d / math.pi


def _as_boxes(items) -> np.ndarray:
    rows = []
    for it in items:
        box = it.box if isinstance(it, Detection) else (it[0] if isinstance(it, tuple) else it)
        rows.append(box.as_array())
    return np.asarray(rows, np.float64).reshape(-1, 7)


def detection_order(boxes: np.ndarray, scores) -> np.ndarray:
    """Descending score; ties by ascending box center then remaining box fields."""
    b = np.asarray(boxes).reshape(-1, 7)
    keys = tuple(b[:, j] for j in (6, 5, 4, 3, 2, 1, 0)) + (-np.asarray(scores, np.float64),)
    return np.lexsort(keys)


def match(dets, gts, iou_thresh: float) -> MatchResult:
    """Greedy single-class matching in descending score order.

    ``gts`` may hold Box3D values or (Box3D, class) pairs; classes are not inspected.
    """
    db = _as_boxes(dets)
    gb = _as_boxes(gts)
    scores = np.array([d.score for d in dets], np.float64)
    order = detection_order(db, scores)
    det_gt = np.full(len(dets), -1, np.int64)
    heading = np.zeros(len(dets))
    matched = np.zeros(len(gb), bool)
    for i in order:
        free = np.flatnonzero(~matched)
        if free.size == 0:
            break
        iou = rotated_iou_one_to_many(db[i], gb[free])
        j = int(np.argmax(iou))
        if iou[j] >= iou_thresh:
            g = int(free[j])
            matched[g] = True
            det_gt[i] = g
            heading[i] = float(heading_weight(db[i, 6], gb[g, 6]))
    return MatchResult(order, det_gt, matched, heading)


def precision_recall(tp_weights, n_gt: int):
    """Precision and recall after each detection, given per-detection TP weight (0 for FP).

    The precision denominator is the number of detections seen so far.
    """
    w = np.asarray(tp_weights, np.float64)
    cum = np.cumsum(w)
    precision = cum / np.arange(1, w.size + 1)
    recall = cum / n_gt if n_gt > 0 else np.zeros_like(cum)
    return precision, recall


def interpolated_ap(precision, recall, R: int = 101) -> float:
    """Mean over R evenly spaced recall levels of the max precision at recall >= level."""
    precision = np.asarray(precision, np.float64)
    recall = np.asarray(recall, np.float64)
    levels = np.arange(R) / (R - 1)
    if precision.size == 0:
        return 0.0
    # envelope from the right: best precision among points with recall >= level
    idx = np.argsort(recall, kind="stable")
    rs, ps = recall[idx], precision[idx]
    suffix_max = np.maximum.accumulate(ps[::-1])[::-1]
    pos = np.searchsorted(rs, levels - _RECALL_EPS, side="left")
    env = np.where(pos < rs.size, suffix_max[np.minimum(pos, rs.size - 1)], 0.0)
    return float(env.sum() / R)


def _weighted_ap(matches: MatchResult, weights, n_gt: int, R: int) -> float:
    n_det = matches.order.size
    if n_gt == 0:
        return 1.0 if n_det == 0 else 0.0
    w = np.asarray(weights, np.float64)[matches.order]
    p, r = precision_recall(w, n_gt)
    return interpolated_ap(p, r, R)


def ap(matches: MatchResult, n_gt: int, R: int = 101) -> float:
    return _weighted_ap(matches, (matches.det_gt >= 0).astype(np.float64), n_gt, R)


def aph(matches: MatchResult, n_gt: int, R: int = 101, headings=None) -> float:
    """AP with each true positive counted with weight 1 - heading error / pi.

    ``headings`` overrides the per-detection weights stored in ``matches``.
    """
    h = matches.heading if headings is None else np.asarray(headings, np.float64)
    return _weighted_ap(matches, np.where(matches.det_gt >= 0, h, 0.0), n_gt, R)


def _check_classes(items, known, what):
    for i, it in enumerate(items):
        cls = it.cls if isinstance(it, Detection) else it[1]
        if cls not in known:
            raise ValueError(f"unknown class id {cls!r} in {what}[{i}]")


def evaluate_corpus(scenes, config: EvalConfig | None = None) -> EvalReport:
    """Evaluate a list of (detections, labels) scene pairs; matching stays within a scene."""
    config = config or EvalConfig()
    known = set(config.classes)
    for s, (dets, gts) in enumerate(scenes):
        _check_classes(dets, known, f"scene {s} detections")
        _check_classes(gts, known, f"scene {s} labels")
    per_class = {}
    for cls in config.classes:
        thr = float(config.iou_thresholds[cls])
        all_boxes, all_scores, tp_w, h_w = [], [], [], []
        n_gt = fn = 0
        for dets, gts in scenes:
            d = [x for x in dets if x.cls == cls]
            g = [x for x in gts if x[1] == cls]
            m = match(d, g, thr)
            n_gt += len(g)
            fn += m.fn
            all_boxes.append(_as_boxes(d))
            all_scores.extend(x.score for x in d)
            tp_w.append((m.det_gt >= 0).astype(np.float64))
            h_w.append(np.where(m.det_gt >= 0, m.heading, 0.0))
        boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 7))
        tp = np.concatenate(tp_w) if tp_w else np.zeros(0)
        hw = np.concatenate(h_w) if h_w else np.zeros(0)
        order = detection_order(boxes, np.asarray(all_scores))
        merged = MatchResult(order, np.where(tp > 0, 0, -1), np.zeros(0, bool), hw)
        per_class[cls] = ClassResult(
            ap=ap(merged, n_gt, config.recall_points),
            aph=aph(merged, n_gt, config.recall_points),
            tp=int(tp.sum()), fp=int(tp.size - tp.sum()), fn=fn,
        )
    return EvalReport(per_class)


def evaluate(dets, labels, config: EvalConfig | None = None) -> EvalReport:
    """Single-scene evaluation. ``labels`` are (Box3D, class) pairs."""
    return evaluate_corpus([(list(dets), list(labels))], config)

