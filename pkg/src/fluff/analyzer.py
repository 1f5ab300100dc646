"""Static architecture analysis: receptive fields, parameter and MAC counts.

A network is described as an ordered list of layer specs. Each spec reads
from ``source`` (the previous layer when ``None``, the image for
``"input"``), which is enough to propagate spatial sizes through the
branching SSD-style layouts this package builds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .block import FluffConfig, rate_schedule
from .ops import conv_output_size


@dataclass
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    source: str | None = None
    bias: bool = True


@dataclass
class PoolSpec:
    name: str
    kernel: int
    stride: int
    padding: int = 0
    ceil_mode: bool = False
    source: str | None = None


@dataclass
class FluffSpec:
    name: str
    config: FluffConfig
    source: str | None = None


@dataclass
class NetworkDescription:
    layers: list = field(default_factory=list)
    in_channels: int = 3
    notes: list[str] = field(default_factory=list)


def receptive_field(rates, kernel: int = 3) -> int:
    """Receptive field of a stride-1 chain of dilated convolutions."""
    rates = list(rates)
    if not rates:
        raise ValueError("rates must be non-empty")
    return 1 + sum((kernel - 1) * int(d) for d in rates)


def conv_params(in_ch: int, out_ch: int, k: int, bias: bool = True) -> int:
    return out_ch * in_ch * k * k + (out_ch if bias else 0)


def fluff_param_breakdown(cfg: FluffConfig) -> dict[str, int]:
    """Closed-form parameter counts of each part of a block."""
    cb = cfg.branch_channels
    has_cells = cfg.fusion_kind in ("dilated_conv", "plain_conv")
    return {
        "entry": cfg.branches * conv_params(cfg.c_pre, cb, 1),
        "cells": cfg.levels * cfg.branches * conv_params(cb, cb, 3) if has_cells else 0,
        "output": conv_params(cfg.concat_channels, cfg.c_out, 1),
        "shortcut": 0 if cfg.identity_shortcut else conv_params(cfg.c_pre, cfg.c_out, 1),
    }


def fluff_param_count(cfg: FluffConfig) -> int:
    return sum(fluff_param_breakdown(cfg).values())


def fluff_macs(cfg: FluffConfig, h: int, w: int) -> int:
    hw = h * w
    cb = cfg.branch_channels
    macs = cfg.branches * hw * cb * cfg.c_pre
    if cfg.fusion_kind in ("dilated_conv", "plain_conv"):
        macs += cfg.levels * cfg.branches * hw * cb * cb * 9
    macs += hw * cfg.c_out * cfg.concat_channels
    if not cfg.identity_shortcut:
        macs += hw * cfg.c_out * cfg.c_pre
    return macs


def fluff_receptive_fields(cfg: FluffConfig) -> list[list[int]]:
    """RF of each lattice cell output relative to the block input (levels x branches)."""
    table = []
    for l in range(cfg.levels):
        table.append([receptive_field([cfg.dilation(i, r) for i in range(l + 1)]) for r in range(cfg.branches)])
    return table


def _pool_out(n, k, s, p, ceil_mode):
    span = n + 2 * p - k
    if span < 0:
        raise ValueError(f"pool window {k} larger than padded input {n + 2 * p}")
    out = (math.ceil(span / s) if ceil_mode else span // s) + 1
    if ceil_mode and (out - 1) * s >= n + p:
        out -= 1
    return out


def _check_complete(layer):
    for k, v in vars(layer).items():
        if v is None and k != "source":
            raise ValueError(f"layer {getattr(layer, 'name', '?')!r} is incomplete: {k} is missing")


def param_count(desc: NetworkDescription) -> int:
    total = 0
    for layer in desc.layers:
        _check_complete(layer)
        if isinstance(layer, ConvSpec):
            total += conv_params(layer.in_channels, layer.out_channels, layer.kernel, layer.bias)
        elif isinstance(layer, FluffSpec):
            total += fluff_param_count(layer.config)
        elif not isinstance(layer, PoolSpec):
            raise ValueError(f"unknown layer type {type(layer).__name__}")
    return total


def analyze(desc: NetworkDescription, input_size: int | tuple[int, int] | None = None) -> dict:
    """Per-layer params, output size, MACs and (for blocks) the RF table.

    Without ``input_size`` only parameter counts and RF tables are filled in.
    """
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    shapes = {"input": (desc.in_channels,) + tuple(input_size)} if input_size else {}
    prev = "input"
    rows = []
    total_params = total_macs = 0
    for layer in desc.layers:
        _check_complete(layer)
        src = layer.source or prev
        if input_size and src not in shapes:
            raise ValueError(f"layer {layer.name!r} reads unknown source {src!r}")
        row = {"name": layer.name, "type": type(layer).__name__.replace("Spec", "").lower(), "source": src}
        in_shape = shapes.get(src)
        if isinstance(layer, ConvSpec):
            if in_shape and in_shape[0] != layer.in_channels:
                raise ValueError(f"layer {layer.name!r} expects {layer.in_channels} channels, source has {in_shape[0]}")
            row["params"] = conv_params(layer.in_channels, layer.out_channels, layer.kernel, layer.bias)
            if in_shape:
                oh = conv_output_size(in_shape[1], layer.kernel, layer.stride, layer.padding, layer.dilation)
                ow = conv_output_size(in_shape[2], layer.kernel, layer.stride, layer.padding, layer.dilation)
                out_shape = (layer.out_channels, oh, ow)
                row["macs"] = oh * ow * layer.out_channels * layer.in_channels * layer.kernel ** 2
        elif isinstance(layer, PoolSpec):
            row["params"] = 0
            if in_shape:
                out_shape = (in_shape[0],
                             _pool_out(in_shape[1], layer.kernel, layer.stride, layer.padding, layer.ceil_mode),
                             _pool_out(in_shape[2], layer.kernel, layer.stride, layer.padding, layer.ceil_mode))
                row["macs"] = 0
        elif isinstance(layer, FluffSpec):
            cfg = layer.config
            if in_shape and in_shape[0] != cfg.c_pre:
                raise ValueError(f"block {layer.name!r} expects {cfg.c_pre} channels, source has {in_shape[0]}")
            row["params"] = fluff_param_count(cfg)
            row["param_breakdown"] = fluff_param_breakdown(cfg)
            row["receptive_fields"] = fluff_receptive_fields(cfg)
            row["config"] = cfg.to_dict()
            if in_shape:
                out_shape = (cfg.c_out,) + in_shape[1:]
                row["macs"] = fluff_macs(cfg, *in_shape[1:])
        else:
            raise ValueError(f"unknown layer type {type(layer).__name__}")
        if in_shape:
            shapes[layer.name] = out_shape
            row["output_shape"] = list(out_shape)
            total_macs += row["macs"]
        total_params += row["params"]
        rows.append(row)
        prev = layer.name
    report = {"layers": rows, "total_params": total_params, "notes": list(desc.notes)}
    if input_size:
        report["input_size"] = list(input_size)
        report["total_macs"] = total_macs
    return report


def flop_count(desc: NetworkDescription, input_size) -> int:
    """Multiply-accumulates of all convolutions for one image."""
    return analyze(desc, input_size)["total_macs"]


def format_report(report: dict) -> str:
    lines = [f"{'layer':<28s} {'type':<6s} {'output':>16s} {'params':>12s} {'MACs':>14s}"]
    for r in report["layers"]:
        shape = "x".join(str(v) for v in r.get("output_shape", [])) or "-"
        macs = f"{r['macs']:,}" if "macs" in r else "-"
        lines.append(f"{r['name']:<28s} {r['type']:<6s} {shape:>16s} {r['params']:>12,} {macs:>14s}")
        if "receptive_fields" in r:
            for l, row in enumerate(r["receptive_fields"]):
                lines.append(f"{'':<28s}   level {l + 1} RF per branch: {row}")
    lines.append(f"{'total':<28s} {'':<6s} {'':>16s} {report['total_params']:>12,} "
                 f"{report.get('total_macs', 0):>14,}")
    for n in report.get("notes", []):
        lines.append(f"note: {n}")
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# static reference models

_VGG16_CFG = [(64, "conv1_1"), (64, "conv1_2"), "pool1",
              (128, "conv2_1"), (128, "conv2_2"), "pool2",
              (256, "conv3_1"), (256, "conv3_2"), (256, "conv3_3"), "pool3",
              (512, "conv4_1"), (512, "conv4_2"), (512, "conv4_3"), "pool4",
              (512, "conv5_1"), (512, "conv5_2"), (512, "conv5_3"), "pool5"]


def vgg16_fc7() -> NetworkDescription:
    """VGG16 truncated after fc7, with fc6/fc7 as convolutions (SSD's reduced base).

    pool3 uses ceil mode (75 -> 38 at 300 input), pool5 is 3x3 stride 1,
    fc6 is a 3x3 conv dilated by 6, fc7 a 1x1 conv.
    """
    layers = []
    c = 3
    for item in _VGG16_CFG:
        if item == "pool5":
            layers.append(PoolSpec("pool5", 3, 1, 1))
        elif isinstance(item, str):
            layers.append(PoolSpec(item, 2, 2, 0, ceil_mode=(item == "pool3")))
        else:
            out, name = item
            layers.append(ConvSpec(name, c, out, 3, padding=1))
            c = out
    layers.append(ConvSpec("fc6", 512, 1024, 3, padding=6, dilation=6))
    layers.append(ConvSpec("fc7", 1024, 1024, 1))
    return NetworkDescription(layers, 3, ["VGG16 through fc7, fc layers converted to convolutions"])


def fluffnet300(num_classes: int = 81) -> NetworkDescription:
    """Static model of the 300x300 detector used for the parameter-count check.

    Assumptions (channel widths of the extra layers and the per-map prior
    counts are not published):

    * backbone is :func:`vgg16_fc7`; blocks post-process conv4_3 and fc7
      with rates kept at [1, 2, 3, 6] on every level;
    * four extra layers, each a 3x3 stride-2 down-sampling conv followed by
      a 3x3 conv; in the first two that 3x3 conv is replaced by a block whose
      rates are scaled with l = 1, 2 (512 and 256 channels), the last two
      stay plain (256 channels);
    * every block has 3 levels and 4 branches, c_out = c_pre;
    * heads are 3x3 convs with [6, 6, 6, 6, 4, 4] priors per cell and
      ``num_classes`` scores (81 for COCO, background included).
    """
    desc = vgg16_fc7()
    layers = desc.layers
    maps = []

    def block(name, c, source, level_scale):
        cfg = FluffConfig(c_pre=c, c_out=c, levels=3, branches=4,
                          rates=(tuple(rate_schedule([1, 2, 3, 6], level_scale)),) * 3)
        layers.append(FluffSpec(name, cfg, source=source))
        maps.append((name, c))

    block("conv4_3.fluff", 512, "conv4_3", 0)
    block("fc7.fluff", 1024, "fc7", 0)
    prev, c_prev = "fc7", 1024
    extras = [(512, 1, 2, 1), (256, 2, 2, 1), (256, 0, 1, 0), (256, 0, 1, 0)]
    for j, (c, level_scale, stride, pad) in enumerate(extras):
        down = f"extra{j + 1}.down"
        layers.append(ConvSpec(down, c_prev, c, 3, stride=stride, padding=pad, source=prev))
        if level_scale:
            block(f"extra{j + 1}.fluff", c, down, level_scale)
            prev = f"extra{j + 1}.fluff"
        else:
            prev = f"extra{j + 1}.conv"
            layers.append(ConvSpec(prev, c, c, 3, padding=1, source=down))
            maps.append((prev, c))
        c_prev = c
    for k, ((src, c), a) in enumerate(zip(maps, [6, 6, 6, 6, 4, 4])):
        layers.append(ConvSpec(f"head{k}.loc", c, a * 4, 3, padding=1, source=src))
        layers.append(ConvSpec(f"head{k}.conf", c, a * num_classes, 3, padding=1, source=src))
    desc.notes = ["static 300x300 model; see fluff.analyzer.fluffnet300 for modelling assumptions"]
    return desc


PRESETS = {
    "fluffnet300": fluffnet300,
    "vgg16-fc7": vgg16_fc7,
    "empty": lambda: NetworkDescription([], 3, ["empty network"]),
}
