"""VOC-style mAP at a single IoU threshold, plus JSON-lines export."""

from __future__ import annotations

import json

import numpy as np

from .boxes import BoxSet, iou_matrix


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_map(detections: dict, ground_truth: dict, iou_threshold: float = 0.5) -> dict:
    """Per-class AP and their unweighted mean.

    ``detections`` maps image id to a :class:`BoxSet` (labels, scores);
    ``ground_truth`` maps image id to ``(boxes, labels)``. Classes without
    ground truth are left out of the mean. Detections are ranked by score,
    ties broken by image id then box coordinates, so the result does not
    depend on the order images or detections are supplied in.
    """
    gt_classes = sorted({int(c) for _, labels in ground_truth.values() for c in np.asarray(labels).reshape(-1)})
    aps = {}
    for cls in gt_classes:
        gts = {}
        n_gt = 0
        for img, (boxes, labels) in ground_truth.items():
            labels = np.asarray(labels).reshape(-1)
            b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[labels == cls]
            gts[img] = (b, np.zeros(len(b), dtype=bool))
            n_gt += len(b)
        rows = []
        for img, dets in detections.items():
            m = dets.labels == cls
            for box, score in zip(dets.boxes[m], dets.scores[m]):
                rows.append((-float(score), str(img), tuple(float(v) for v in box), img))
        rows.sort(key=lambda r: r[:3])
        tp = np.zeros(len(rows))
        for k, (_, _, box, img) in enumerate(rows):
            if img not in gts or len(gts[img][0]) == 0:
                continue
            gboxes, used = gts[img]
            ov = iou_matrix(np.array([box]), gboxes)[0]
            j = int(ov.argmax())
            if ov[j] >= iou_threshold and not used[j]:
                used[j] = True
                tp[k] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(rows) + 1) if rows else np.zeros(0)
        aps[cls] = average_precision(recall, precision)
    mean = float(np.mean(list(aps.values()))) if aps else float("nan")
    return {"ap": aps, "map": mean, "iou_threshold": iou_threshold}


def detections_to_jsonl(detections: dict) -> str:
    lines = []
    for img in sorted(detections, key=str):
        d = detections[img]
        for box, score, label in zip(d.boxes, d.scores, d.labels):
            lines.append(json.dumps({"image_id": img, "class": int(label), "score": float(score),
                                     "box": [float(v) for v in box]}))
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_jsonl(text: str) -> dict:
    rows = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        rows.setdefault(r["image_id"], []).append(r)
    return {img: BoxSet([r["box"] for r in rs], [r["score"] for r in rs], [r["class"] for r in rs])
            for img, rs in rows.items()}
