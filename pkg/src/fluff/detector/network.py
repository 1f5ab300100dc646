"""Desk-scale SSD-style detector with per-feature-map fusion blocks.

Layout, for a :class:`~fluff.config.ModelConfig`:

* backbone: 3x3 conv + ReLU layers; some of their outputs are feature maps.
  A map in ``post_process_backbone`` mode is passed through its own block
  before the head; the backbone itself continues from the raw output.
* extra layers: a 3x3 down-sampling conv + ReLU, then a 3x3 conv + ReLU
  whose output is the feature map. In ``replace_extra_layer`` mode that
  second conv is replaced by a block, and the block output also feeds the
  next extra layer.
* heads: per map, 3x3 convs for box offsets and class logits.

Blocks on backbone maps keep the initial dilation rates; the block in the
j-th extra layer (1-based) scales them with ``rate_schedule(init, j)``.
"""

from __future__ import annotations

import numpy as np

from .. import block, ops
from ..analyzer import ConvSpec, FluffSpec, NetworkDescription
from ..block import FluffConfig, FluffParams, make_variant, rate_schedule
from ..config import EvalSettings, ModelConfig
from ..ops import ConvParams
from .boxes import BoxSet, PriorBoxSpec, decode_boxes, generate_priors, nms


def _down(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


class Detector:
    """Parameters live in :attr:`params` (name -> float32 array)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.attach = cfg.attachments()
        self.num_classes = cfg.num_classes
        self.params: dict[str, np.ndarray] = {}
        self.blocks: dict[str, FluffConfig] = {}
        self._specs: list = []
        self._geometry: dict[str, tuple[int, int, int]] = {}
        rng = np.random.default_rng(seed)

        size = cfg.image_size
        c = cfg.in_channels
        bb_shapes = []
        for i, layer in enumerate(cfg.backbone):
            self._conv(f"backbone.{i}", c, layer.out_channels, 3, rng, stride=layer.stride, padding=1,
                       source="input" if i == 0 else f"backbone.{i - 1}")
            c = layer.out_channels
            size = _down(size, layer.stride)
            bb_shapes.append((c, size))

        self.map_shapes = []  # (channels, size) per feature map
        self.map_sources = []
        for k, i in enumerate(cfg.backbone_maps):
            ch, sz = bb_shapes[i]
            src = f"backbone.{i}"
            if self.attach[k] == "post_process_backbone":
                src = self._block(f"map{k}.fluff", ch, 0, rng, source=src)
            self.map_shapes.append((ch, sz))
            self.map_sources.append(src)

        prev = f"backbone.{len(cfg.backbone) - 1}"
        for j, layer in enumerate(cfg.extra_layers):
            k = len(cfg.backbone_maps) + j
            self._conv(f"extra.{j}.down", c, layer.out_channels, 3, rng, stride=layer.stride, padding=1, source=prev)
            c = layer.out_channels
            size = _down(size, layer.stride)
            if self.attach[k] == "replace_extra_layer":
                prev = self._block(f"extra.{j}.fluff", c, j + 1, rng, source=f"extra.{j}.down")
            else:
                self._conv(f"extra.{j}.conv", c, c, 3, rng, padding=1, source=f"extra.{j}.down")
                prev = f"extra.{j}.conv"
            self.map_shapes.append((c, size))
            self.map_sources.append(prev)

        self.priors_per_cell = [len(p.aspect_ratios) for p in cfg.priors]
        for k, ((ch, _), a) in enumerate(zip(self.map_shapes, self.priors_per_cell)):
            self._conv(f"head.{k}.loc", ch, a * 4, 3, rng, padding=1, source=self.map_sources[k], gain=1.0)
            self._conv(f"head.{k}.conf", ch, a * self.num_classes, 3, rng, padding=1, source=self.map_sources[k],
                       gain=1.0)
        self.prior_specs = [PriorBoxSpec((sz, sz), p.scale, list(p.aspect_ratios))
                            for (_, sz), p in zip(self.map_shapes, cfg.priors)]
        self.priors = generate_priors(self.prior_specs).boxes

    # -- construction helpers -------------------------------------------------

    def _conv(self, name, c_in, c_out, k, rng, stride=1, padding=0, dilation=1, source=None, gain=2.0):
        std = np.sqrt(gain / (c_in * k * k))
        self.params[f"{name}.weight"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(self.dtype)
        self.params[f"{name}.bias"] = np.zeros(c_out, dtype=self.dtype)
        self._specs.append(ConvSpec(name, c_in, c_out, k, stride, padding, dilation, source=source))
        self._geometry[name] = (stride, padding, dilation)

    def _block(self, prefix, channels, level_scale, rng, source):
        s = self.cfg.fluff
        row = tuple(rate_schedule(s.init_rates, level_scale))
        base = FluffConfig(c_pre=channels, c_out=channels, levels=s.levels, branches=s.branches,
                           rates=(row,) * s.levels, identity_shortcut=s.identity_shortcut)
        cfg = make_variant(base, s.variant)
        fp = block.init_fluff_params(cfg, rng, dtype=self.dtype)
        for name, arr in fp.named().items():
            self.params[f"{prefix}.{name}"] = arr
        self.blocks[prefix] = cfg
        self._specs.append(FluffSpec(prefix, cfg, source=source))
        return prefix

    def conv_params(self, name) -> ConvParams:
        stride, padding, dilation = self._geometry[name]
        return ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, padding, dilation)

    def block_params(self, prefix) -> FluffParams:
        n = len(prefix) + 1
        named = {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}
        return FluffParams.from_named(self.blocks[prefix], named)

    def describe(self) -> NetworkDescription:
        return NetworkDescription(list(self._specs), self.cfg.in_channels)

    @property
    def num_priors(self) -> int:
        return len(self.priors)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, cache: dict | None = None):
        """Return ``(loc, conf)`` of shapes (N, P, 4) and (N, P, num_classes)."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected input (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        keep = cache is not None
        st = {}

        def conv(name, inp, relu=True):
            c = {} if keep else None
            pre = ops.conv2d_forward(inp, self.conv_params(name), cache=c)
            if keep:
                st[name] = (inp, pre, c)
            return ops.relu_forward(pre) if relu else pre

        def fluff(prefix, inp):
            c = {} if keep else None
            out = block.fluff_forward(inp, self.blocks[prefix], self.block_params(prefix), cache=c)
            if keep:
                st[prefix] = (inp, c)
            return out

        h = x
        bb = []
        for i in range(len(cfg.backbone)):
            h = conv(f"backbone.{i}", h)
            bb.append(h)
        feats = []
        for k, i in enumerate(cfg.backbone_maps):
            feats.append(fluff(f"map{k}.fluff", bb[i]) if self.attach[k] == "post_process_backbone" else bb[i])
        for j in range(len(cfg.extra_layers)):
            d = conv(f"extra.{j}.down", h)
            if self.attach[len(cfg.backbone_maps) + j] == "replace_extra_layer":
                h = fluff(f"extra.{j}.fluff", d)
            else:
                h = conv(f"extra.{j}.conv", d)
            feats.append(h)
        locs, confs = [], []
        n = x.shape[0]
        for k, f in enumerate(feats):
            locs.append(conv(f"head.{k}.loc", f, relu=False).transpose(0, 2, 3, 1).reshape(n, -1, 4))
            confs.append(conv(f"head.{k}.conf", f, relu=False).transpose(0, 2, 3, 1).reshape(n, -1, self.num_classes))
        if keep:
            cache["st"] = st
            cache["bb"] = bb
        return np.concatenate(locs, axis=1), np.concatenate(confs, axis=1)

    def backward(self, grad_loc: np.ndarray, grad_conf: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Gradients of all parameters; ``cache`` must come from :meth:`forward`."""
        cfg = self.cfg
        st = cache["st"]
        grads = {}

        def conv_back(name, g, relu=True):
            inp, pre, c = st[name]
            if relu:
                g = ops.relu_backward(pre, g)
            gx, grads[f"{name}.weight"], grads[f"{name}.bias"] = ops.conv2d_backward(inp, self.conv_params(name), g, cache=c)
            return gx

        def fluff_back(prefix, g):
            inp, c = st[prefix]
            gx, gp = block.fluff_backward(inp, self.blocks[prefix], self.block_params(prefix), g, cache=c)
            for name, v in gp.items():
                grads[f"{prefix}.{name}"] = v
            return gx

        n = grad_loc.shape[0]
        gfeat = []
        start = 0
        for k, ((_, sz), a) in enumerate(zip(self.map_shapes, self.priors_per_cell)):
            cnt = sz * sz * a
            gl = grad_loc[:, start:start + cnt].reshape(n, sz, sz, a * 4).transpose(0, 3, 1, 2)
            gc = grad_conf[:, start:start + cnt].reshape(n, sz, sz, a * self.num_classes).transpose(0, 3, 1, 2)
            start += cnt
            gfeat.append(conv_back(f"head.{k}.loc", np.ascontiguousarray(gl), relu=False)
                         + conv_back(f"head.{k}.conf", np.ascontiguousarray(gc), relu=False))

        nb = len(cfg.backbone_maps)
        g_chain = None
        for j in range(len(cfg.extra_layers) - 1, -1, -1):
            g = gfeat[nb + j] if g_chain is None else gfeat[nb + j] + g_chain
            if self.attach[nb + j] == "replace_extra_layer":
                gd = fluff_back(f"extra.{j}.fluff", g)
            else:
                gd = conv_back(f"extra.{j}.conv", g)
            g_chain = conv_back(f"extra.{j}.down", gd)

        gbb = [None] * len(cfg.backbone)
        if g_chain is not None:
            gbb[-1] = g_chain
        for k, i in enumerate(cfg.backbone_maps):
            g = fluff_back(f"map{k}.fluff", gfeat[k]) if self.attach[k] == "post_process_backbone" else gfeat[k]
            gbb[i] = g if gbb[i] is None else gbb[i] + g
        g = None
        for i in range(len(cfg.backbone) - 1, -1, -1):
            if gbb[i] is not None:
                g = gbb[i] if g is None else g + gbb[i]
            if g is None:
                name = f"backbone.{i}"
                grads[f"{name}.weight"] = np.zeros_like(self.params[f"{name}.weight"])
                grads[f"{name}.bias"] = np.zeros_like(self.params[f"{name}.bias"])
                continue
            g = conv_back(f"backbone.{i}", g)
        return grads

    # -- inference -------------------------------------------------------------

    def decode(self, loc: np.ndarray, conf: np.ndarray, score_threshold: float = 0.01) -> list[BoxSet]:
        """Per-image candidate detections (before suppression)."""
        z = conf.astype(np.float64)
        z = np.exp(z - z.max(axis=2, keepdims=True))
        prob = z / z.sum(axis=2, keepdims=True)
        out = []
        for n in range(loc.shape[0]):
            boxes = np.clip(decode_boxes(self.priors, loc[n]), 0.0, 1.0)
            p = prob[n, :, 1:]
            idx, cls = np.nonzero(p > score_threshold)
            out.append(BoxSet(boxes[idx], p[idx, cls], cls + 1))
        return out

    def predict(self, x: np.ndarray, settings: EvalSettings | None = None) -> list[BoxSet]:
        s = settings or EvalSettings()
        loc, conf = self.forward(x)
        return [nms(c, s.nms_iou, s.score_threshold, s.top_k) for c in self.decode(loc, conf, s.score_threshold)]
