"""Anchor and center detection heads, rotated BEV IoU, and class-wise greedy NMS."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .archspec import HeadSpec
from .kernels import conv2d
from .network import Detector, PreHeadFeatures, forward
from .pointcloud import Box3D, box_corners_bev, wrap_angle


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    cls: str

    def to_json(self) -> dict:
        rec = self.box.to_json()
        rec["class"] = self.cls
        rec["score"] = self.score
        return rec


@dataclass(frozen=True, eq=False)
class AnchorSet:
    boxes: np.ndarray  # (H*W*classes*yaws, 7), layout (row, col, class, yaw)
    resolution: tuple  # (W, H)
    sizes: tuple
    z_centers: tuple

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @cached_property
    def anchors(self) -> list:
        return [Box3D.from_array(b) for b in self.boxes]


@dataclass(frozen=True, eq=False)
class RawAnchorMaps:
    cls_logits: np.ndarray  # (anchors_per_cell * classes, H, W)
    box_residuals: np.ndarray  # (anchors_per_cell * 7, H, W)


@dataclass(frozen=True, eq=False)
class RawCenterMaps:
    heatmap: np.ndarray  # (classes, H, W), post-sigmoid
    regression: np.ndarray  # (8, H, W): off_x, off_y, z, log l, log w, log h, sin, cos


def sigmoid(x):
    x = np.asarray(x, np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Anchor head


def gen_anchors(resolution, head: HeadSpec, metric_transform) -> AnchorSet:
    if head.kind != "anchor":
        raise ValueError("gen_anchors needs an anchor-kind head")
    W, H = resolution
    x_min, y_min, csx, csy = metric_transform
    K, R = len(head.classes), len(head.yaws)
    rows, cols, ks, rs = np.meshgrid(np.arange(H), np.arange(W), np.arange(K), np.arange(R),
                                     indexing="ij")
    rows, cols, ks, rs = (a.reshape(-1) for a in (rows, cols, ks, rs))
    sizes = np.asarray(head.anchor_sizes, np.float64)
    boxes = np.empty((rows.size, 7), np.float64)
    boxes[:, 0] = x_min + (cols + 0.5) * csx
    boxes[:, 1] = y_min + (rows + 0.5) * csy
    boxes[:, 2] = np.asarray(head.anchor_z, np.float64)[ks]
    boxes[:, 3:6] = sizes[ks]
    boxes[:, 6] = np.asarray(head.yaws, np.float64)[rs]
    return AnchorSet(boxes, (W, H), tuple(map(tuple, sizes)), tuple(head.anchor_z))


def encode_anchor(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals that decode_anchor maps back onto ``gt``."""
    gt = np.asarray(gt, np.float64).reshape(-1, 7)
    a = np.asarray(anchors, np.float64).reshape(-1, 7)
    diag = np.hypot(a[:, 3], a[:, 4])
    return np.stack([
        (gt[:, 0] - a[:, 0]) / diag,
        (gt[:, 1] - a[:, 1]) / diag,
        (gt[:, 2] - a[:, 2]) / a[:, 5],
        np.log(gt[:, 3] / a[:, 3]),
        np.log(gt[:, 4] / a[:, 4]),
        np.log(gt[:, 5] / a[:, 5]),
        wrap_angle(gt[:, 6] - a[:, 6]),
    ], axis=1)


def decode_boxes(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    r = np.asarray(residuals, np.float64).reshape(-1, 7)
    a = np.asarray(anchors, np.float64).reshape(-1, 7)
    diag = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] + r[:, 0] * diag
    out[:, 1] = a[:, 1] + r[:, 1] * diag
    out[:, 2] = a[:, 2] + r[:, 2] * a[:, 5]
    out[:, 3:6] = a[:, 3:6] * np.exp(r[:, 3:6])
    out[:, 6] = wrap_angle(a[:, 6] + r[:, 6])
    return out


def _flatten_anchor_maps(raw: RawAnchorMaps, n_classes: int):
    ak, H, W = raw.cls_logits.shape
    A = ak // n_classes
    if raw.box_residuals.shape != (A * 7, H, W):
        raise ValueError("anchor map shapes are inconsistent")
    logits = raw.cls_logits.reshape(A, n_classes, H, W).transpose(2, 3, 0, 1).reshape(-1, n_classes)
    res = raw.box_residuals.reshape(A, 7, H, W).transpose(2, 3, 0, 1).reshape(-1, 7)
    return logits, res


def decode_anchor_arrays(raw: RawAnchorMaps, anchors: AnchorSet, score_threshold: float,
                         n_classes: int | None = None):
    """Array form of decode_anchor: (boxes, scores, class indices) above threshold."""
    n_classes = n_classes or len(anchors.sizes)
    logits, res = _flatten_anchor_maps(raw, n_classes)
    if logits.shape[0] != len(anchors):
        raise ValueError(f"maps hold {logits.shape[0]} anchors, anchor set has {len(anchors)}")
    best = logits.argmax(axis=1)
    scores = sigmoid(logits[np.arange(logits.shape[0]), best])
    keep = np.flatnonzero(scores >= score_threshold)
    boxes = decode_boxes(res[keep], anchors.boxes[keep])
    return boxes, scores[keep], best[keep]


def decode_anchor(raw: RawAnchorMaps, anchors: AnchorSet, score_threshold: float,
                  classes=None) -> list:
    classes = tuple(classes) if classes is not None else tuple(range(len(anchors.sizes)))
    boxes, scores, cls = decode_anchor_arrays(raw, anchors, score_threshold, len(classes))
    return _to_detections(boxes, scores, cls, classes)


# ---------------------------------------------------------------------------
# Center head


def find_peaks(heatmap: np.ndarray, threshold: float):
    """(class, row, col) of cells that strictly exceed all in-bounds 3x3 neighbors."""
    K, H, W = heatmap.shape
    padded = np.full((K, H + 2, W + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heatmap
    strict = np.ones(heatmap.shape, bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            strict &= heatmap > padded[:, 1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    strict &= heatmap >= threshold
    return np.nonzero(strict)


def decode_center_arrays(raw: RawCenterMaps, metric_transform, peak_threshold: float, max_dets: int):
    hm = np.asarray(raw.heatmap, np.float64)
    reg = np.asarray(raw.regression, np.float64)
    if reg.shape[0] != 8 or reg.shape[1:] != hm.shape[1:]:
        raise ValueError("center map shapes are inconsistent")
    k, r, c = find_peaks(hm, peak_threshold)
    scores = hm[k, r, c]
    order = np.lexsort((c, r, k, -scores))[:max_dets]
    k, r, c, scores = k[order], r[order], c[order], scores[order]
    x_min, y_min, csx, csy = metric_transform
    v = reg[:, r, c]
    boxes = np.stack([
        x_min + (c + v[0]) * csx,
        y_min + (r + v[1]) * csy,
        v[2],
        np.exp(v[3]), np.exp(v[4]), np.exp(v[5]),
        np.arctan2(v[6], v[7]),
    ], axis=1).reshape(-1, 7)
    boxes[:, 6] = wrap_angle(boxes[:, 6])
    return boxes, scores, k


def decode_center(raw: RawCenterMaps, metric_transform, peak_threshold: float, max_dets: int,
                  classes=None) -> list:
    classes = tuple(classes) if classes is not None else tuple(range(raw.heatmap.shape[0]))
    boxes, scores, cls = decode_center_arrays(raw, metric_transform, peak_threshold, max_dets)
    return _to_detections(boxes, scores, cls, classes)


def _to_detections(boxes, scores, cls, classes) -> list:
    return [Detection(Box3D.from_array(b), float(s), classes[int(k)])
            for b, s, k in zip(boxes, scores, cls)]


# ---------------------------------------------------------------------------
# Rotated BEV IoU


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject, clip):
    """Sutherland-Hodgman: clip a polygon against a counter-clockwise convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        inp, out = out, []

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return out


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated BEV rectangles (height ignored)."""
    ca, cb = a.corners_bev(), b.corners_bev()
    inter = _polygon_area(_clip(ca, cb))
    union = a.length * a.width + b.length * b.width - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _inside(points, corners, eps=1e-9):
    """points (M, P, 2) inside rectangles given by corners (M, 4, 2)."""
    o = corners[:, None, 0]
    e1 = corners[:, None, 1] - o
    e2 = corners[:, None, 3] - o
    d = points - o
    u = (d * e1).sum(-1) / (e1 * e1).sum(-1)
    v = (d * e2).sum(-1) / (e2 * e2).sum(-1)
    return (u >= -eps) & (u <= 1 + eps) & (v >= -eps) & (v <= 1 + eps)


def rotated_iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Vectorized IoU of one (7,) box against (M, 7) boxes.

    The intersection polygon is the convex hull of corners inside the other
    rectangle plus edge-edge crossings, ordered by angle about its centroid.
    """
    boxes = np.asarray(boxes, np.float64).reshape(-1, 7)
    M = boxes.shape[0]
    if M == 0:
        return np.zeros(0)
    ca = np.broadcast_to(box_corners_bev(np.asarray(box)[None])[0], (M, 4, 2))
    cb = box_corners_bev(boxes)
    in_a = _inside(cb, ca)
    in_b = _inside(ca, cb)
    # edge crossings
    p = ca[:, :, None, :]
    r = (np.roll(ca, -1, axis=1) - ca)[:, :, None, :]
    q = cb[:, None, :, :]
    s = (np.roll(cb, -1, axis=1) - cb)[:, None, :, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    cross_ok = (np.abs(denom) > 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    t = np.where(cross_ok, t, 0.0)
    cross = (p + t[..., None] * r).reshape(M, 16, 2)
    pts = np.concatenate([ca, cb, cross], axis=1)
    valid = np.concatenate([in_b, in_a, cross_ok.reshape(M, 16)], axis=1)
    pts = np.where(valid[..., None], pts, 0.0)
    n_valid = valid.sum(axis=1)
    center = pts.sum(axis=1) / np.maximum(n_valid, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - center[:, None, 1], pts[..., 0] - center[:, None, 0])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    first = pts[:, :1]
    pts = np.where(valid[..., None], pts, first)
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * np.abs((pts[..., 0] * nxt[..., 1] - pts[..., 1] * nxt[..., 0]).sum(axis=1))
    area = np.where(n_valid >= 3, area, 0.0)
    union = box[3] * box[4] + boxes[:, 3] * boxes[:, 4] - area
    return np.clip(area / union, 0.0, 1.0)


# ---------------------------------------------------------------------------
# NMS


def score_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending (cx, cy, cz)."""
    boxes = np.asarray(boxes).reshape(-1, 7)
    return np.lexsort((boxes[:, 2], boxes[:, 1], boxes[:, 0], -np.asarray(scores)))


def nms_indices(boxes, scores, classes, iou_threshold: float, top_k: int | None = None) -> np.ndarray:
    """Class-wise greedy NMS over arrays; returns kept indices in score order."""
    boxes = np.asarray(boxes, np.float64).reshape(-1, 7)
    scores = np.asarray(scores)
    classes = np.asarray(classes)
    order = score_order(boxes, scores)
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    suppressed = np.zeros(boxes.shape[0], bool)
    kept = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(i)
        if top_k is not None and len(kept) >= top_k:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest] & (classes[rest] == classes[i])]
        if rest.size == 0:
            continue
        near = np.hypot(boxes[rest, 0] - boxes[i, 0], boxes[rest, 1] - boxes[i, 1]) < radius[rest] + radius[i]
        rest = rest[near]
        if rest.size == 0:
            continue
        iou = rotated_iou_one_to_many(boxes[i], boxes[rest])
        suppressed[rest[iou >= iou_threshold]] = True
    return np.asarray(kept, dtype=np.int64)


def nms(dets: list, iou_threshold: float, top_k: int | None = None) -> list:
    if not dets:
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    names = sorted({d.cls for d in dets}, key=str)
    classes = np.array([names.index(d.cls) for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_threshold, top_k)]


# ---------------------------------------------------------------------------
# Full pipeline


def _conv_head(det: Detector, feats: PreHeadFeatures, workers: int):
    return [conv2d(feats.map, layer.params, workers) for layer in det.head_layers]


def predict_arrays(det: Detector, feats: PreHeadFeatures, workers: int = 1):
    """Head maps -> decoded (boxes, scores, class indices) before NMS."""
    head = det.spec.head
    a, b = _conv_head(det, feats, workers)
    if head.kind == "anchor":
        anchors = gen_anchors(feats.resolution, head, feats.metric_transform)
        return decode_anchor_arrays(RawAnchorMaps(a, b), anchors, head.score_threshold,
                                    len(head.classes))
    raw = RawCenterMaps(sigmoid(a), b)
    return decode_center_arrays(raw, feats.metric_transform, head.score_threshold,
                                head.pre_nms_top_k)


def postprocess(det: Detector, boxes, scores, cls) -> list:
    head = det.spec.head
    top = score_order(boxes, scores)[:head.pre_nms_top_k]
    boxes, scores, cls = boxes[top], scores[top], cls[top]
    kept = nms_indices(boxes, scores, cls, head.nms_iou, head.post_nms_top_k)
    return _to_detections(boxes[kept], scores[kept], cls[kept], head.classes)


def detect(det: Detector, cloud, grid, workers: int = 1):
    """voxelize through NMS for a single cloud (batch size 1). Returns (detections, trace)."""
    feats, trace = forward(det, cloud, grid, workers)
    t0 = time.perf_counter_ns()
    if trace.active_voxels == 0:
        # no occupied voxel, no evidence: an all-zero map would otherwise score 0.5 at every anchor
        t2 = t1 = t0
        dets = []
    else:
        boxes, scores, cls = predict_arrays(det, feats, workers)
        t1 = time.perf_counter_ns()
        dets = postprocess(det, boxes, scores, cls)
        t2 = time.perf_counter_ns()
    trace.stages.update(head=t1 - t0, nms=t2 - t1)
    return dets, trace


# ---------------------------------------------------------------------------
# JSON


def detections_to_json(dets) -> list:
    return [d.to_json() for d in dets]


def dumps_detections(dets) -> str:
    return json.dumps(detections_to_json(dets), indent=1) + "\n"


def detections_from_json(records, source="<detections>") -> list:
    out = []
    for i, rec in enumerate(records):
        try:
            box = Box3D(*(float(rec[k]) for k in
                          ("cx", "cy", "cz", "length", "width", "height", "yaw")))
            score = float(rec["score"])
            cls = rec["class"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{source}[{i}]: invalid detection record ({exc})") from None
        if not (np.isfinite(box.as_array()).all() and math.isfinite(score)):
            raise ValueError(f"{source}[{i}]: non-finite value")
        out.append(Detection(box, score, cls))
    return out


def read_detections(path) -> list:
    with open(path) as fh:
        return detections_from_json(json.load(fh), source=str(path))
