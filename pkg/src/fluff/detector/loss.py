"""Prior matching and the multibox loss (smooth-L1 + mined cross-entropy)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import VARIANCES, encode_boxes, iou_matrix


def match_priors(priors: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray, threshold: float = 0.5,
                 variances=VARIANCES):
    """Assign each prior a class (0 = background) and a regression target.

    A prior is positive when its best IoU with any ground-truth box reaches
    ``threshold``; in addition every ground-truth box claims its single best
    prior regardless of overlap.
    """
    P = len(priors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return np.zeros(P, dtype=np.int64), np.zeros((P, 4))
    ov = iou_matrix(gt_boxes, priors)
    best_gt = ov.argmax(axis=0)
    best_ov = ov.max(axis=0)
    for g, p in enumerate(ov.argmax(axis=1)):
        best_gt[p] = g
        best_ov[p] = 2.0
    labels = gt_labels[best_gt].copy()
    labels[best_ov < threshold] = 0
    return labels, encode_boxes(priors, gt_boxes[best_gt], variances)


@dataclass
class LossResult:
    loss: float
    loc_loss: float
    conf_loss: float
    grad_loc: np.ndarray
    grad_conf: np.ndarray
    num_pos: int
    signature: bytes = b""


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def multibox_loss(loc_pred: np.ndarray, conf_pred: np.ndarray, priors: np.ndarray, ground_truth,
                  match_iou: float = 0.5, neg_pos_ratio: float = 3.0, targets=None) -> LossResult:
    """SSD loss for a batch.

    ``loc_pred`` is (N, P, 4) offsets, ``conf_pred`` (N, P, C) logits and
    ``ground_truth`` a length-N sequence of ``(boxes, labels)`` with labels
    in 1..C-1; an image with no boxes is background-only. Per image the
    hardest ``neg_pos_ratio * num_pos`` background priors are mined (a
    background-only image counts as one positive for this purpose). The
    sum of both terms is divided by the batch's positive count.

    ``targets`` may carry precomputed ``match_priors`` output per image.
    """
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    N, P, C = conf_pred.shape
    if P == 0:
        raise ValueError("no priors")
    if loc_pred.shape != (N, P, 4) or len(ground_truth) != N:
        raise ValueError("prediction / ground-truth shapes disagree")
    if targets is None:
        targets = [match_priors(priors, b, l, match_iou) for b, l in ground_truth]
    conf_t = np.stack([t[0] for t in targets])
    loc_t = np.stack([t[1] for t in targets])
    pos = conf_t > 0
    num_pos = pos.sum(axis=1)

    loc = loc_pred.astype(np.float64)
    d = loc - loc_t
    ad = np.abs(d)
    quad = ad < 1.0
    sl1 = np.where(quad, 0.5 * d * d, ad - 0.5)
    loc_loss = float((sl1.sum(axis=2) * pos).sum())
    dloc = np.where(quad, d, np.sign(d)) * pos[..., None]

    logp = _log_softmax(conf_pred.astype(np.float64))
    ce = -np.take_along_axis(logp, conf_t[..., None], axis=2)[..., 0]
    mining = np.where(pos, -np.inf, ce)
    selected = pos.copy()
    for n in range(N):
        k = int(min(neg_pos_ratio * max(int(num_pos[n]), 1), P - int(num_pos[n])))
        if k > 0:
            order = np.argsort(-mining[n], kind="stable")[:k]
            selected[n, order] = True
    conf_loss = float(ce[selected].sum())
    prob = np.exp(logp)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, conf_t[..., None], 1.0, axis=2)
    dconf = (prob - onehot) * selected[..., None]

    norm = max(int(num_pos.sum()), 1)
    sig = selected.tobytes() + (quad & pos[..., None]).tobytes()
    return LossResult(
        loss=(loc_loss + conf_loss) / norm,
        loc_loss=loc_loss / norm,
        conf_loss=conf_loss / norm,
        grad_loc=(dloc / norm).astype(loc_pred.dtype),
        grad_conf=(dconf / norm).astype(conf_pred.dtype),
        num_pos=int(num_pos.sum()),
        signature=sig,
    )
