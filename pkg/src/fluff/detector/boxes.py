"""Boxes, prior generation, SSD offset coding, IoU and greedy NMS.

Boxes are ``(x_min, y_min, x_max, y_max)`` in image-normalised coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VARIANCES = (0.1, 0.2)


@dataclass
class BoxSet:
    boxes: np.ndarray
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.scores = np.zeros(n) if self.scores is None else np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.zeros(n, dtype=np.int64) if self.labels is None else np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.scores) != n or len(self.labels) != n:
            raise ValueError("boxes, scores and labels must have equal length")

    def __len__(self):
        return len(self.boxes)

    def subset(self, idx) -> "BoxSet":
        idx = np.asarray(idx, dtype=np.int64)
        return BoxSet(self.boxes[idx], self.scores[idx], self.labels[idx])

    def validate(self) -> None:
        b = self.boxes
        if np.any(b[:, 0] > b[:, 2]) or np.any(b[:, 1] > b[:, 3]):
            raise ValueError("box with min corner beyond max corner")
        if np.any(b < 0) or np.any(b > 1):
            raise ValueError("box outside the unit square")


@dataclass
class PriorBoxSpec:
    grid: tuple[int, int]
    scale: float
    aspect_ratios: list[float] = field(default_factory=lambda: [1.0])

    @property
    def per_cell(self) -> int:
        return len(self.aspect_ratios)


def generate_priors(specs) -> BoxSet:
    """Tile one box per aspect ratio on every cell of every grid.

    Ordering is map, row, column, ratio, matching how head outputs are
    flattened. Boxes are clamped to the unit square.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("empty prior spec")
    out = []
    for s in specs:
        gh, gw = s.grid
        if gh < 1 or gw < 1 or s.scale <= 0 or not s.aspect_ratios:
            raise ValueError(f"invalid prior spec {s}")
        ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
        for_cell = []
        for a in s.aspect_ratios:
            w = s.scale * math.sqrt(a)
            h = s.scale / math.sqrt(a)
            for_cell.append(np.stack([xs - w / 2, ys - h / 2, xs + w / 2, ys + h / 2], axis=-1))
        out.append(np.stack(for_cell, axis=2).reshape(-1, 4))
    return BoxSet(np.clip(np.concatenate(out), 0.0, 1.0))


def _center_size(b: np.ndarray) -> np.ndarray:
    return np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2, b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)


def encode_boxes(priors: np.ndarray, targets: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Offsets that turn each prior into its target box."""
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if len(priors) != len(targets):
        raise ValueError(f"{len(priors)} priors but {len(targets)} targets")
    p, t = _center_size(priors), _center_size(targets)
    return np.stack([
        (t[:, 0] - p[:, 0]) / (variances[0] * p[:, 2]),
        (t[:, 1] - p[:, 1]) / (variances[0] * p[:, 3]),
        np.log(t[:, 2] / p[:, 2]) / variances[1],
        np.log(t[:, 3] / p[:, 3]) / variances[1],
    ], axis=1)


def decode_boxes(priors: np.ndarray, offsets: np.ndarray, variances=VARIANCES) -> np.ndarray:
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if len(priors) != len(offsets):
        raise ValueError(f"{len(priors)} priors but {len(offsets)} offsets")
    p = _center_size(priors)
    cx = p[:, 0] + offsets[:, 0] * variances[0] * p[:, 2]
    cy = p[:, 1] + offsets[:, 1] * variances[0] * p[:, 3]
    w = p[:, 2] * np.exp(offsets[:, 2] * variances[1])
    h = p[:, 3] * np.exp(offsets[:, 3] * variances[1])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms_indices(dets: BoxSet, iou_threshold: float = 0.45, score_threshold: float = 0.01,
                top_k: int | None = 200) -> np.ndarray:
    """Indices kept by per-class greedy NMS, in (score desc, index asc) order.

    Equal scores are resolved in favour of the lower original index.
    """
    scores = dets.scores
    cand = np.flatnonzero(scores > score_threshold)
    order = cand[np.argsort(-scores[cand], kind="stable")]
    keep_mask = np.zeros(len(dets), dtype=bool)
    boxes = dets.boxes
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for label in np.unique(dets.labels[order]):
        rest = order[dets.labels[order] == label]
        while rest.size:
            i, rest = rest[0], rest[1:]
            keep_mask[i] = True
            if not rest.size:
                break
            ix = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
            iy = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
            inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
            union = areas[i] + areas[rest] - inter
            with np.errstate(invalid="ignore", divide="ignore"):
                ov = np.where(union > 0, inter / union, 0.0)
            rest = rest[ov <= iou_threshold]
    kept = order[keep_mask[order]]
    return kept[:top_k] if top_k is not None else kept


def nms(dets: BoxSet, iou_threshold: float = 0.45, score_threshold: float = 0.01, top_k: int | None = 200) -> BoxSet:
    return dets.subset(nms_indices(dets, iou_threshold, score_threshold, top_k))
