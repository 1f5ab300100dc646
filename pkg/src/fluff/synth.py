"""Deterministic synthetic detection data: squares, discs and triangles.

Objects are drawn into non-overlapping boxes so every annotation is the
exact bounding box of its rendered mask. Object sizes follow a
small/medium/large mixture; the size classes use the COCO area cut-offs
(32^2 and 96^2 pixels) rescaled from a 300-pixel reference image to the
configured image size.

On disk a dataset is::

    <dir>/dataset.json        generation spec and class names
    <dir>/annotations.jsonl   one {"image_id", "file", "boxes", "labels"} row per image
    <dir>/images/NNNNNN.tns   (1, 3, S, S) float32 tensor per image
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import read_tensor, write_tensor

CLASSES = ("square", "disc", "triangle")
COCO_MIXTURE = (0.415, 0.343, 0.242)
REFERENCE_SIZE = 300
MIN_AREA = 4


class DatasetError(ValueError):
    pass


@dataclass
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    mixture: tuple[float, float, float] = COCO_MIXTURE
    classes: tuple[str, ...] = CLASSES
    max_side_fraction: float = 0.45
    seed: int = 0

    def __post_init__(self):
        self.mixture = tuple(float(m) for m in self.mixture)
        self.classes = tuple(self.classes)
        if len(self.mixture) != 3 or min(self.mixture) < 0 or abs(sum(self.mixture) - 1.0) > 1e-9:
            raise DatasetError(f"mixture must be three non-negative fractions summing to 1, got {self.mixture}")
        if not set(self.classes) <= set(CLASSES) or not self.classes:
            raise DatasetError(f"classes must be a subset of {CLASSES}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DatasetError("need 1 <= min_objects <= max_objects")
        lo, hi = self.area_thresholds
        ranges = self.area_ranges()
        for frac, (a, b) in zip(self.mixture, ranges):
            if frac > 0 and a > b:
                raise DatasetError(f"size class [{a}, {b}] is empty at image size {self.image_size}")
        # every object needs its box plus a one-pixel gap
        min_side = min(math.isqrt(a - 1) + 1 for f, (a, _) in zip(self.mixture, ranges) if f > 0)
        if self.min_objects * (min_side + 1) ** 2 > self.image_size ** 2:
            raise DatasetError(f"{self.min_objects} objects cannot fit in a {self.image_size}px image")

    @property
    def area_thresholds(self) -> tuple[float, float]:
        s = self.image_size / REFERENCE_SIZE
        return (32 * s) ** 2, (96 * s) ** 2

    def area_ranges(self) -> list[tuple[int, int]]:
        """Inclusive integer pixel-area ranges of the small, medium and large classes."""
        small, medium = self.area_thresholds
        largest = int(self.max_side_fraction * self.image_size) ** 2
        return [(MIN_AREA, math.ceil(small) - 1), (math.ceil(small), math.ceil(medium) - 1),
                (math.ceil(medium), largest)]

    def size_class(self, area: float) -> int:
        small, medium = self.area_thresholds
        return 0 if area < small else (1 if area < medium else 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixture"] = list(self.mixture)
        d["classes"] = list(self.classes)
        return d


def _mask(kind: str, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if kind == "square":
        return np.ones((h, w), dtype=bool)
    if kind == "disc":
        return ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0
    if kind == "triangle":
        return np.abs(xs - w / 2) <= (w / 2) * (ys / h) + 0.5
    raise DatasetError(f"unknown shape {kind!r}")


def _sample_object(spec: SceneSpec, rng: np.random.Generator, size_class: int, kind: str):
    """Shape mask whose tight bounding box falls in the requested size class."""
    lo, hi = spec.area_ranges()[size_class]
    for _ in range(200):
        area = math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))
        aspect = math.exp(rng.uniform(-0.25, 0.25))
        w = max(2, int(round(math.sqrt(area * aspect))))
        h = max(2, int(round(math.sqrt(area / aspect))))
        if w > spec.image_size - 2 or h > spec.image_size - 2:
            continue
        m = _mask(kind, w, h)
        rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
        m = m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        a = m.shape[0] * m.shape[1]
        if a >= MIN_AREA and spec.size_class(a) == size_class and lo <= a <= hi:
            return m
    raise DatasetError(f"could not draw a {kind} in size class {size_class}")


def _free_positions(occupied: np.ndarray, h: int, w: int) -> np.ndarray:
    """Top-left corners where an h x w box plus a one-pixel gap touches nothing occupied."""
    S = occupied.shape[0]
    if h > S or w > S:
        return np.zeros((0, 2), dtype=np.int64)
    # summed-area table over the occupancy grid padded by the gap
    pad = np.pad(occupied, 1).astype(np.int64)
    sat = np.pad(pad.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    ys, xs = np.mgrid[0:S - h + 1, 0:S - w + 1]
    # window rows y0-1..y0+h in image coordinates = y0..y0+h+1 in padded coordinates
    y1, x1 = ys + h + 2, xs + w + 2
    busy = sat[y1, x1] - sat[ys, x1] - sat[y1, xs] + sat[ys, xs]
    return np.argwhere(busy == 0)


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _layout(spec: SceneSpec, rng: np.random.Generator):
    """Draw a scene's objects and place them, largest first; None if they do not fit."""
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objs = []
    for _ in range(n):
        size_class = int(rng.choice(3, p=spec.mixture))
        cls = int(rng.integers(len(spec.classes)))
        objs.append((_sample_object(spec, rng, size_class, spec.classes[cls]), cls))
    objs.sort(key=lambda o: -o[0].size)
    occupied = np.zeros((spec.image_size, spec.image_size), dtype=bool)
    placed = []
    for m, cls in objs:
        free = _free_positions(occupied, *m.shape)
        if not len(free):
            return None
        y0, x0 = (int(v) for v in free[rng.integers(len(free))])
        occupied[y0:y0 + m.shape[0], x0:x0 + m.shape[1]] = True
        placed.append((m, cls, y0, x0))
    return placed


def generate_image(spec: SceneSpec, index: int):
    """Render image ``index``; returns ``(pixels (3, S, S), boxes (n, 4), labels (n,))``.

    Objects never overlap and keep a one-pixel gap. A scene that cannot be
    packed is redrawn.
    """
    rng = _image_rng(spec.seed, index)
    S = spec.image_size
    img = rng.uniform(0.0, 0.25, size=(3, S, S))
    for _ in range(100):
        placed = _layout(spec, rng)
        if placed is not None:
            break
    else:
        raise DatasetError(f"image {index}: could not pack {spec.max_objects} objects into {S}x{S}")
    boxes, labels = [], []
    for m, cls, y0, x0 in placed:
        h, w = m.shape
        color = rng.uniform(0.35, 1.0, size=3)
        region = img[:, y0:y0 + h, x0:x0 + w]
        region[:, m] = color[:, None]
        boxes.append([x0 / S, y0 / S, (x0 + w) / S, (y0 + h) / S])
        labels.append(cls + 1)
    return img.astype(np.float32), np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels, dtype=np.int64)


def generate_dataset(spec: SceneSpec, n_images: int):
    """Return ``(images (N, 3, S, S), annotations)``; annotations are dicts per image."""
    if n_images < 1:
        raise DatasetError("n_images must be >= 1")
    images = np.empty((n_images, 3, spec.image_size, spec.image_size), dtype=np.float32)
    anns = []
    for i in range(n_images):
        images[i], boxes, labels = generate_image(spec, i)
        anns.append({"image_id": i, "boxes": boxes.tolist(), "labels": labels.tolist()})
    return images, anns


def write_dataset(out_dir, spec: SceneSpec, n_images: int) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, anns = generate_dataset(spec, n_images)
    lines = []
    for img, ann in zip(images, anns):
        rel = f"images/{ann['image_id']:06d}.tns"
        write_tensor(out / rel, img[None])
        lines.append(json.dumps({**ann, "file": rel}, sort_keys=True))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"spec": spec.to_dict(), "n_images": n_images, "class_names": ["background", *spec.classes]}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    images: np.ndarray
    boxes: list[np.ndarray]
    labels: list[np.ndarray]
    image_ids: list[int]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def ground_truth(self) -> dict:
        return {i: (b, l) for i, b, l in zip(self.image_ids, self.boxes, self.labels)}


def load_dataset(path) -> Dataset:
    root = Path(path)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise DatasetError(f"{root} has no annotations.jsonl")
    rows = [json.loads(l) for l in ann_path.read_text().splitlines() if l.strip()]
    if not rows:
        raise DatasetError(f"{ann_path} is empty")
    images = np.concatenate([read_tensor(root / r["file"]).data for r in rows])
    meta = json.loads((root / "dataset.json").read_text()) if (root / "dataset.json").exists() else {}
    return Dataset(images,
                   [np.asarray(r["boxes"], dtype=np.float64).reshape(-1, 4) for r in rows],
                   [np.asarray(r["labels"], dtype=np.int64) for r in rows],
                   [r["image_id"] for r in rows], meta)


def hflip(images: np.ndarray, boxes: list[np.ndarray]):
    """Mirror images left-right and remap their boxes."""
    flipped = [np.stack([1 - b[:, 2], b[:, 1], 1 - b[:, 0], b[:, 3]], axis=1) if len(b) else b for b in boxes]
    return images[..., ::-1].copy(), flipped
