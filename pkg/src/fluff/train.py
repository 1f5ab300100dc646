"""SGD training, checkpoints and mAP evaluation for :class:`Detector`.

A checkpoint is a directory::

    <dir>/manifest.json      model config, parameter names, files and shapes
    <dir>/params/<name>.tns  one tensor file per parameter

Lower-rank parameters (biases) are stored padded to 4-D; the manifest keeps
their true shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EvalSettings, ModelConfig, TrainSettings
from .detector import Detector, evaluate_map, match_priors, multibox_loss, nms
from .synth import Dataset, hflip
from .tensor import TensorFileError, as_4d, read_tensor, write_tensor

CHECKPOINT_FORMAT = "fluff-checkpoint/1"


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_loc: list[float] = field(default_factory=list)
    epoch_conf: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "epoch_loc": self.epoch_loc, "epoch_conf": self.epoch_conf}


def learning_rate(s: TrainSettings, epoch: int) -> float:
    return s.lr * s.decay_factor ** sum(epoch >= e for e in s.decay_epochs)


def train(det: Detector, data: Dataset, s: TrainSettings, log=None) -> TrainLog:
    """Train ``det`` in place with momentum SGD and L2 weight decay.

    Shuffling and flips draw from ``s.seed`` so runs are reproducible.
    Raises :class:`NumericError` as soon as the loss or a gradient is not finite.
    """
    rng = np.random.default_rng(s.seed)
    targets = [match_priors(det.priors, b, l) for b, l in zip(data.boxes, data.labels)]
    velocity = {k: np.zeros_like(v) for k, v in det.params.items()}
    out = TrainLog()
    n = len(data)
    for epoch in range(s.epochs):
        lr = learning_rate(s, epoch)
        order = rng.permutation(n)
        tot = loc_tot = conf_tot = 0.0
        batches = 0
        for start in range(0, n, s.batch_size):
            idx = order[start:start + s.batch_size]
            x = data.images[idx]
            boxes = [data.boxes[i] for i in idx]
            tgt = [targets[i] for i in idx]
            if s.hflip:
                flip = rng.random(len(idx)) < 0.5
                if flip.any():
                    x = x.copy()
                    fx, fb = hflip(x[flip], [boxes[i] for i in np.flatnonzero(flip)])
                    x[flip] = fx
                    for j, b in zip(np.flatnonzero(flip), fb):
                        tgt[j] = match_priors(det.priors, b, data.labels[idx[j]])
            cache = {}
            loc, conf = det.forward(x, cache)
            res = multibox_loss(loc, conf, det.priors, [(None, None)] * len(idx), targets=tgt)
            if not math.isfinite(res.loss):
                raise NumericError(f"epoch {epoch + 1}, batch {batches + 1}: loss is {res.loss}")
            grads = det.backward(res.grad_loc, res.grad_conf, cache)
            _sgd_step(det.params, grads, velocity, lr, s, where=f"epoch {epoch + 1}, batch {batches + 1}")
            tot += res.loss
            loc_tot += res.loc_loss
            conf_tot += res.conf_loss
            batches += 1
        out.epoch_loss.append(tot / batches)
        out.epoch_loc.append(loc_tot / batches)
        out.epoch_conf.append(conf_tot / batches)
        if log is not None:
            log(f"epoch {epoch + 1}/{s.epochs} lr={lr:.2e} loss={out.epoch_loss[-1]:.4f} "
                f"(loc {out.epoch_loc[-1]:.4f}, conf {out.epoch_conf[-1]:.4f})")
    return out


def _sgd_step(params, grads, velocity, lr, s: TrainSettings, where=""):
    if s.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericError(f"{where}: gradient norm is {norm}")
        scale = min(1.0, s.grad_clip / norm) if norm > 0 else 1.0
    else:
        scale = 1.0
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{where}: non-finite gradient for {name}")
        v = velocity[name]
        v *= s.momentum
        v += scale * g + s.weight_decay * p
        p -= lr * v


# -- evaluation --------------------------------------------------------------


def predict_dataset(det: Detector, data: Dataset, s: EvalSettings) -> dict:
    """Detections per image id after decoding and suppression."""
    out = {}
    for start in range(0, len(data), s.batch_size):
        loc, conf = det.forward(data.images[start:start + s.batch_size])
        cands = det.decode(loc, conf, s.score_threshold)
        for k, c in enumerate(cands):
            out[data.image_ids[start + k]] = nms(c, s.nms_iou, s.score_threshold, s.top_k)
    return out


def evaluate(det: Detector, data: Dataset, s: EvalSettings | None = None) -> dict:
    s = s or EvalSettings()
    return evaluate_map(predict_dataset(det, data, s), data.ground_truth(), s.map_iou)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(det: Detector, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(det.params):
        arr = det.params[name]
        rel = f"params/{name}.tns"
        write_tensor(out / rel, as_4d(arr))
        entries.append({"name": name, "file": rel, "shape": list(arr.shape)})
    manifest = {"format": CHECKPOINT_FORMAT, "model": det.cfg.model_dump(mode="json"), "params": entries}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path, cfg: ModelConfig | None = None) -> Detector:
    """Rebuild a detector from a checkpoint.

    If ``cfg`` is given it must describe the same parameter set as the
    checkpoint; any missing, extra or mis-shaped tensor raises
    :class:`CheckpointError`.
    """
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"{root} has no manifest.json") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    det = Detector(cfg if cfg is not None else ModelConfig.model_validate(manifest["model"]))
    stored = {e["name"]: e for e in manifest["params"]}
    if set(stored) != set(det.params):
        missing = sorted(set(det.params) - set(stored))
        extra = sorted(set(stored) - set(det.params))
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, e in stored.items():
        want = det.params[name].shape
        if tuple(e["shape"]) != want:
            raise CheckpointError(f"{name}: checkpoint shape {tuple(e['shape'])}, model expects {want}")
        try:
            data = read_tensor(root / e["file"]).data
        except (OSError, TensorFileError) as err:
            raise CheckpointError(f"{name}: {err}") from err
        if data.size != int(np.prod(want)):
            raise CheckpointError(f"{name}: tensor file holds {data.size} values, expected {int(np.prod(want))}")
        det.params[name][...] = data.reshape(want)
    return det
