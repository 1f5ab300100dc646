"""JSON run configuration.

Every section rejects unknown keys. Defaults describe the desk-scale
setup: 64x64 synthetic images, a two-layer backbone and two extra layers.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .block import INIT_RATES, VARIANT_ROWS
from .synth import CLASSES, COCO_MIXTURE

AttachMode = Literal["post_process_backbone", "replace_extra_layer", "none"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConvLayer(_Strict):
    out_channels: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)


class PriorMap(_Strict):
    scale: float = Field(gt=0)
    aspect_ratios: list[float] = Field(default_factory=lambda: [1.0], min_length=1)


class FluffSettings(_Strict):
    variant: str = "Fluff"
    levels: int = Field(default=3, gt=0)
    branches: int = Field(default=4, gt=0)
    init_rates: list[int] = Field(default_factory=lambda: list(INIT_RATES))
    identity_shortcut: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.variant not in VARIANT_ROWS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANT_ROWS}")
        if len(self.init_rates) != self.branches or min(self.init_rates) < 1:
            raise ValueError("init_rates needs one positive rate per branch")
        return self


class ModelConfig(_Strict):
    """Detection network layout (backbone, attachment points, priors)."""

    image_size: int = Field(default=64, gt=0)
    in_channels: int = Field(default=3, gt=0)
    num_classes: int = Field(default=4, gt=1, description="score classes, background included")
    backbone: list[ConvLayer] = Field(default_factory=lambda: [ConvLayer(out_channels=16, stride=2),
                                                               ConvLayer(out_channels=32, stride=2)])
    backbone_maps: list[int] = Field(default_factory=lambda: [1])
    extra_layers: list[ConvLayer] = Field(default_factory=lambda: [ConvLayer(out_channels=32, stride=2),
                                                                   ConvLayer(out_channels=32, stride=2)])
    priors: list[PriorMap] = Field(default_factory=lambda: [
        PriorMap(scale=0.1, aspect_ratios=[1.0, 2.0, 0.5]),
        PriorMap(scale=0.25, aspect_ratios=[1.0, 2.0, 0.5]),
        PriorMap(scale=0.55, aspect_ratios=[1.0, 2.0, 0.5]),
    ])
    attach: list[AttachMode] | None = None
    fluff: FluffSettings = Field(default_factory=FluffSettings)

    @property
    def num_maps(self) -> int:
        return len(self.backbone_maps) + len(self.extra_layers)

    def attachments(self) -> list[str]:
        if self.fluff.variant == "SSD-baseline" or self.attach is None:
            return ["none"] * self.num_maps
        return list(self.attach)

    @model_validator(mode="after")
    def _check(self):
        if not self.backbone:
            raise ValueError("backbone needs at least one layer")
        if sorted(set(self.backbone_maps)) != self.backbone_maps or any(
                not 0 <= i < len(self.backbone) for i in self.backbone_maps):
            raise ValueError("backbone_maps must be increasing indices into backbone")
        if len(self.priors) != self.num_maps:
            raise ValueError(f"{self.num_maps} feature maps but {len(self.priors)} prior specs")
        if self.attach is not None:
            if len(self.attach) != self.num_maps:
                raise ValueError(f"attach needs {self.num_maps} entries, got {len(self.attach)}")
            nb = len(self.backbone_maps)
            for k, mode in enumerate(self.attach):
                allowed = ("post_process_backbone", "none") if k < nb else ("replace_extra_layer", "none")
                if mode not in allowed:
                    raise ValueError(f"map {k} cannot use attachment {mode!r}")
        return self


def fluff_model(**overrides) -> ModelConfig:
    """Default model with blocks attached on every feature map."""
    m = ModelConfig(**overrides)
    nb = len(m.backbone_maps)
    attach = ["post_process_backbone"] * nb + ["replace_extra_layer"] * len(m.extra_layers)
    return m.model_copy(update={"attach": attach})


class TrainSettings(_Strict):
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, gt=0)
    lr: float = Field(default=1e-3, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    decay_epochs: list[int] = Field(default_factory=list)
    decay_factor: float = Field(default=0.1, gt=0)
    grad_clip: float | None = Field(default=None, gt=0)
    hflip: bool = False
    seed: int = Field(default=0, ge=0)


class DataSettings(_Strict):
    train_dir: str | None = None
    test_dir: str | None = None


class EvalSettings(_Strict):
    score_threshold: float = 0.01
    nms_iou: float = 0.45
    top_k: int = 200
    map_iou: float = 0.5
    batch_size: int = 32


class BenchSettings(_Strict):
    warmup: int = Field(default=3, ge=1)
    iters: int = Field(default=20, ge=1)
    batch_size: int = Field(default=1, gt=0)
    threads: int | None = Field(default=1, description="BLAS threads; null leaves the library default")


class SceneSettings(_Strict):
    """Input of ``gen-data``: generator settings plus the image count."""

    n_images: int = Field(default=1000, ge=1)
    image_size: int = Field(default=64, gt=0)
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=4, ge=1)
    mixture: list[float] = Field(default_factory=lambda: list(COCO_MIXTURE), min_length=3, max_length=3)
    classes: list[str] = Field(default_factory=lambda: list(CLASSES), min_length=1)
    max_side_fraction: float = Field(default=0.45, gt=0, le=1)
    seed: int = Field(default=0, ge=0)


class RunConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSettings = Field(default_factory=TrainSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())


def load_scene(path) -> SceneSettings:
    return SceneSettings.model_validate_json(Path(path).read_text())
