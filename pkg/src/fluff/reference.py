"""Slow, independent reference kernels used as test and gradcheck oracles.

None of these share code with :mod:`fluff.ops`.
"""

from __future__ import annotations

import numpy as np


def conv2d_naive(x, weight, bias, stride=1, padding=0, dilation=1):
    """Six-deep loop nest, float64 accumulation, rounded once to ``x.dtype``."""
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    assert ic == c
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xd = x.astype(np.float64)
    wd = weight.astype(np.float64)
    out = np.zeros((b, oc, oh, ow), dtype=np.float64)
    for n in range(b):
        for o in range(oc):
            for y in range(oh):
                for xo in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            yy = y * stride - padding + i * dilation
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(kw):
                                xx = xo * stride - padding + j * dilation
                                if 0 <= xx < w:
                                    s += wd[o, ci, i, j] * xd[n, ci, yy, xx]
                    out[n, o, y, xo] = s + float(bias[o])
    return out.astype(x.dtype)


def zero_insert_kernel(weight: np.ndarray, dilation: int) -> np.ndarray:
    """Spread kernel taps ``dilation`` apart, filling the gaps with zeros."""
    oc, ic, kh, kw = weight.shape
    ext_h = kh + (kh - 1) * (dilation - 1)
    ext_w = kw + (kw - 1) * (dilation - 1)
    out = np.zeros((oc, ic, ext_h, ext_w), dtype=weight.dtype)
    out[:, :, ::dilation, ::dilation] = weight
    return out


def conv2d_shift_sum(x, weight, bias, padding=0):
    """Stride-1, dilation-1 convolution as a sum of shifted channel mixes.

    Each kernel tap contributes ``einsum(W[:, :, i, j], shifted x)``; there
    is no lowering to columns, so this is structurally unlike the main kernel.
    """
    b, c, h, w = x.shape
    oc, _, kh, kw = weight.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((b, oc, oh, ow), dtype=np.float64)
    wd = weight.astype(np.float64)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("oc,bchw->bohw", wd[:, :, i, j], xp[:, :, i:i + oh, j:j + ow])
    return (out + bias.astype(np.float64)[None, :, None, None]).astype(x.dtype)


def dilated_conv_via_zero_insertion(x, weight, bias, padding, dilation):
    """Dilated convolution computed as a standard one with the expanded kernel."""
    return conv2d_shift_sum(x, zero_insert_kernel(weight, dilation), bias, padding)


def iou_scalar(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_exhaustive(boxes, scores, labels, iou_threshold, score_threshold=0.0, top_k=None):
    """Brute-force greedy NMS on Python lists.

    Candidates are visited in (score desc, index asc) order; a box survives if
    no already-kept box of its class overlaps it by more than the threshold.
    """
    n = len(scores)
    order = sorted((i for i in range(n) if scores[i] > score_threshold), key=lambda i: (-float(scores[i]), i))
    kept = []
    for i in order:
        bi = [float(v) for v in boxes[i]]
        ok = True
        for j in kept:
            if labels[j] == labels[i] and iou_scalar([float(v) for v in boxes[j]], bi) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    if top_k is not None:
        kept = kept[:top_k]
    return kept
