"""Inference latency: prediction (forward + decode) and suppression timed apart.

Every timed run records ``t_pred`` and ``t_nms`` from the same pass, so a
run's ``t_infer`` is their sum by construction. The headline figures are
means over the timed runs, which keeps ``T_infer = T_pred + T_nms`` exact
for the reported numbers; medians and percentiles are listed alongside.
"""

from __future__ import annotations

import json
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .config import BenchSettings, EvalSettings
from .detector import Detector, nms


@dataclass
class BenchReport:
    t_pred_ms: float
    t_nms_ms: float
    t_infer_ms: float
    fps: float
    batch_size: int
    iters: int
    warmup: int
    pred_stats: dict
    nms_stats: dict
    infer_stats: dict
    samples_ms: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("T_pred", self.pred_stats), ("T_nms", self.nms_stats), ("T_infer", self.infer_stats)]
        lines = [f"{'':<8s} {'mean':>10s} {'median':>10s} {'p5':>10s} {'p95':>10s}   (ms, batch {self.batch_size})"]
        for name, st in rows:
            lines.append(f"{name:<8s} {st['mean']:>10.3f} {st['median']:>10.3f} {st['p5']:>10.3f} {st['p95']:>10.3f}")
        lines.append(f"FPS      {self.fps:>10.2f}")
        return "\n".join(lines)


def _stats(v: np.ndarray) -> dict:
    return {"mean": float(v.mean()), "median": float(np.median(v)),
            "p5": float(np.percentile(v, 5)), "p95": float(np.percentile(v, 95))}


def make_report(pred_ms, nms_ms, batch_size: int = 1, warmup: int = 0) -> BenchReport:
    """Build a report from per-run samples in milliseconds."""
    pred = np.asarray(pred_ms, dtype=np.float64)
    sup = np.asarray(nms_ms, dtype=np.float64)
    if pred.shape != sup.shape or pred.size == 0:
        raise ValueError("need the same non-zero number of prediction and suppression samples")
    t_pred = float(pred.sum() / pred.size)
    t_nms = float(sup.sum() / sup.size)
    t_infer = t_pred + t_nms
    return BenchReport(
        t_pred_ms=t_pred, t_nms_ms=t_nms, t_infer_ms=t_infer, fps=1000.0 / t_infer,
        batch_size=batch_size, iters=int(pred.size), warmup=warmup,
        pred_stats=_stats(pred), nms_stats=_stats(sup), infer_stats=_stats(pred + sup),
        samples_ms={"pred": pred.tolist(), "nms": sup.tolist()},
    )


def benchmark(det: Detector, s: BenchSettings | None = None, ev: EvalSettings | None = None,
              x: np.ndarray | None = None, clock=time.perf_counter) -> BenchReport:
    """Time ``s.iters`` inference passes after ``s.warmup`` untimed ones.

    ``x`` defaults to a fixed pseudo-random batch. ``s.threads`` caps BLAS
    threads for the duration (None leaves them alone).
    """
    s = s or BenchSettings()
    ev = ev or EvalSettings()
    cfg = det.cfg
    if x is None:
        x = np.random.default_rng(0).random((s.batch_size, cfg.in_channels, cfg.image_size, cfg.image_size),
                                            dtype=np.float32)
    limits = threadpool_limits(limits=s.threads) if s.threads is not None else nullcontext()
    pred, sup = [], []
    with limits:
        for i in range(s.warmup + s.iters):
            t0 = clock()
            loc, conf = det.forward(x)
            cands = det.decode(loc, conf, ev.score_threshold)
            t1 = clock()
            for c in cands:
                nms(c, ev.nms_iou, ev.score_threshold, ev.top_k)
            t2 = clock()
            if i >= s.warmup:
                pred.append((t1 - t0) * 1000.0)
                sup.append((t2 - t1) * 1000.0)
    return make_report(pred, sup, s.batch_size, s.warmup)
