"""The latticed multi-level, multi-branch dilated-convolution fusion block.

Each of ``R`` branches projects the input with a 1x1 conv to ``c_pre / R``
channels, then runs a chain of ``L`` same-size 3x3 convolutions (dilated by
``rates[l][r]``). All ``L * R`` chain outputs are concatenated level-major,
passed through ReLU and a 1x1 output projection, added to a 1x1 shortcut
projection of the input, and passed through a final ReLU.

Ablation variants swap the 3x3 op (plain conv, max/avg pooling of the same
extent) and toggle the ReLU between consecutive levels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .ops import ConvParams

INIT_RATES = (1, 2, 3, 6)
FUSION_KINDS = ("dilated_conv", "plain_conv", "max_pool", "avg_pool")
VARIANT_ROWS = ("SSD-baseline", "ANet", "BNet", "CNet", "CNet-maxpool", "CNet-avgpool", "DNet", "Fluff")


def rate_schedule(init_rates, level_scale: int) -> list[int]:
    """Scale dilation rates by ``1 + 0.25 * level_scale`` and round half away from zero.

    Done in integer arithmetic (``(4 + l) * r / 4``) so results never depend
    on float rounding. Results are clamped to at least 1.
    """
    if level_scale < 0:
        raise ValueError("level_scale must be >= 0")
    out = []
    for r in init_rates:
        r = int(r)
        if r < 1:
            raise ValueError(f"rates must be positive, got {r}")
        out.append(max(1, ((4 + level_scale) * r + 2) // 4))
    return out


def default_rates(levels: int, branches: int, level_scale: int = 0) -> tuple[tuple[int, ...], ...]:
    if branches > len(INIT_RATES):
        raise ValueError(f"no default rates for {branches} branches; pass rates explicitly")
    row = tuple(rate_schedule(INIT_RATES[:branches], level_scale))
    return (row,) * levels


@dataclass(frozen=True)
class FluffConfig:
    c_pre: int
    c_out: int | None = None
    levels: int = 3
    branches: int = 4
    rates: tuple[tuple[int, ...], ...] | None = None
    fusion_kind: str = "dilated_conv"
    inter_level_relu: bool = True
    identity_shortcut: bool = False

    def __post_init__(self):
        if self.c_out is None:
            object.__setattr__(self, "c_out", self.c_pre)
        if self.levels < 1 or self.branches < 1:
            raise ValueError("levels and branches must be positive")
        if self.c_pre < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if self.c_pre % self.branches:
            raise ValueError(f"c_pre={self.c_pre} is not divisible by branches={self.branches}")
        if self.rates is None:
            object.__setattr__(self, "rates", default_rates(self.levels, self.branches))
        rates = tuple(tuple(int(r) for r in row) for row in self.rates)
        object.__setattr__(self, "rates", rates)
        if len(rates) != self.levels or any(len(row) != self.branches for row in rates):
            raise ValueError(f"rates must be {self.levels}x{self.branches}, got {[len(r) for r in rates]}")
        if any(r < 1 for row in rates for r in row):
            raise ValueError("all rates must be >= 1")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion_kind {self.fusion_kind!r}; expected one of {FUSION_KINDS}")
        if self.identity_shortcut and self.c_pre != self.c_out:
            raise ValueError("identity shortcut needs c_pre == c_out")

    @property
    def multi_level(self) -> bool:
        return self.levels > 1

    @property
    def multi_branch(self) -> bool:
        return self.branches > 1

    @property
    def branch_channels(self) -> int:
        return self.c_pre // self.branches

    @property
    def concat_channels(self) -> int:
        return self.levels * self.branches * self.branch_channels

    def dilation(self, level: int, branch: int) -> int:
        """Dilation actually applied at a lattice cell (plain convs ignore rates)."""
        return 1 if self.fusion_kind == "plain_conv" else self.rates[level][branch]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = [list(r) for r in self.rates]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FluffConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown FluffConfig keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("rates") is not None:
            d["rates"] = tuple(tuple(r) for r in d["rates"])
        return cls(**d)


def make_variant(base: FluffConfig, row: str) -> FluffConfig | None:
    """Config for one ablation row; ``None`` for the block-free baseline."""
    if row not in VARIANT_ROWS:
        raise ValueError(f"unknown variant row {row!r}; expected one of {VARIANT_ROWS}")
    if row == "SSD-baseline":
        return None
    if row == "ANet":
        rates = tuple(r[:1] for r in base.rates)
        return replace(base, branches=1, rates=rates, fusion_kind="plain_conv", inter_level_relu=False)
    if row == "BNet":
        return replace(base, levels=1, rates=base.rates[:1], fusion_kind="plain_conv", inter_level_relu=False)
    kind = {
        "CNet": "plain_conv",
        "CNet-maxpool": "max_pool",
        "CNet-avgpool": "avg_pool",
        "DNet": "dilated_conv",
        "Fluff": "dilated_conv",
    }[row]
    return replace(base, fusion_kind=kind, inter_level_relu=(row == "Fluff"))


def _he_conv(rng, c_out, c_in, k, dilation=1, padding=0, dtype=np.float32) -> ConvParams:
    std = np.sqrt(2.0 / (c_in * k * k))
    w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
    return ConvParams(w, np.zeros(c_out, dtype=dtype), stride=1, padding=padding, dilation=dilation)


@dataclass
class FluffParams:
    entry: list[ConvParams]
    cells: list[list[ConvParams | None]]  # levels x branches; None where the cell is a pooling op
    output: ConvParams
    shortcut: ConvParams | None = None

    def named(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name; the arrays are the live buffers, not copies."""
        out = {}
        for r, p in enumerate(self.entry):
            out[f"entry.{r}.weight"] = p.weight
            out[f"entry.{r}.bias"] = p.bias
        for l, row in enumerate(self.cells):
            for r, p in enumerate(row):
                if p is not None:
                    out[f"cell.{l}.{r}.weight"] = p.weight
                    out[f"cell.{l}.{r}.bias"] = p.bias
        out["output.weight"] = self.output.weight
        out["output.bias"] = self.output.bias
        if self.shortcut is not None:
            out["shortcut.weight"] = self.shortcut.weight
            out["shortcut.bias"] = self.shortcut.bias
        return out

    @classmethod
    def from_named(cls, cfg: FluffConfig, named: dict) -> "FluffParams":
        """Rebuild params from a name -> array mapping (extra keys are ignored)."""

        def conv(prefix, d=1, padding=0):
            return ConvParams(named[f"{prefix}.weight"], named[f"{prefix}.bias"], 1, padding, d)

        entry = [conv(f"entry.{r}") for r in range(cfg.branches)]
        has_cells = cfg.fusion_kind in ("dilated_conv", "plain_conv")
        cells = [[conv(f"cell.{l}.{r}", cfg.dilation(l, r), cfg.dilation(l, r)) if has_cells else None
                  for r in range(cfg.branches)]
                 for l in range(cfg.levels)]
        shortcut = None if cfg.identity_shortcut else conv("shortcut")
        params = cls(entry, cells, conv("output"), shortcut)
        params.check(cfg)
        return params

    def check(self, cfg: FluffConfig) -> None:
        """Raise if any tensor shape disagrees with ``cfg``."""
        expected = expected_shapes(cfg)
        got = {k: v.shape for k, v in self.named().items()}
        if got != expected:
            missing = set(expected) ^ set(got)
            wrong = {k for k in set(expected) & set(got) if expected[k] != got[k]}
            raise ValueError(f"params do not match config: names differing {sorted(missing)}, shapes {sorted(wrong)}")
        for l, row in enumerate(self.cells):
            for r, p in enumerate(row):
                if p is not None and (p.dilation != cfg.dilation(l, r) or p.padding != cfg.dilation(l, r)):
                    raise ValueError(f"cell ({l}, {r}) has dilation {p.dilation}, config says {cfg.dilation(l, r)}")


def expected_shapes(cfg: FluffConfig) -> dict[str, tuple]:
    cb = cfg.branch_channels
    shapes = {}
    for r in range(cfg.branches):
        shapes[f"entry.{r}.weight"] = (cb, cfg.c_pre, 1, 1)
        shapes[f"entry.{r}.bias"] = (cb,)
    if cfg.fusion_kind in ("dilated_conv", "plain_conv"):
        for l in range(cfg.levels):
            for r in range(cfg.branches):
                shapes[f"cell.{l}.{r}.weight"] = (cb, cb, 3, 3)
                shapes[f"cell.{l}.{r}.bias"] = (cb,)
    shapes["output.weight"] = (cfg.c_out, cfg.concat_channels, 1, 1)
    shapes["output.bias"] = (cfg.c_out,)
    if not cfg.identity_shortcut:
        shapes["shortcut.weight"] = (cfg.c_out, cfg.c_pre, 1, 1)
        shapes["shortcut.bias"] = (cfg.c_out,)
    return shapes


def init_fluff_params(cfg: FluffConfig, rng: np.random.Generator, dtype=np.float32) -> FluffParams:
    cb = cfg.branch_channels
    entry = [_he_conv(rng, cb, cfg.c_pre, 1, dtype=dtype) for _ in range(cfg.branches)]
    cells = []
    for l in range(cfg.levels):
        row = []
        for r in range(cfg.branches):
            if cfg.fusion_kind in ("dilated_conv", "plain_conv"):
                d = cfg.dilation(l, r)
                row.append(_he_conv(rng, cb, cb, 3, dilation=d, padding=d, dtype=dtype))
            else:
                row.append(None)
        cells.append(row)
    output = _he_conv(rng, cfg.c_out, cfg.concat_channels, 1, dtype=dtype)
    shortcut = None if cfg.identity_shortcut else _he_conv(rng, cfg.c_out, cfg.c_pre, 1, dtype=dtype)
    params = FluffParams(entry, cells, output, shortcut)
    params.check(cfg)
    return params


def _cell_forward(cfg, params, l, r, u, cache):
    d = cfg.rates[l][r]
    if cfg.fusion_kind == "max_pool":
        return ops.maxpool2d_forward(u, 2 * d + 1, 1, d, cache=cache)
    if cfg.fusion_kind == "avg_pool":
        return ops.avgpool2d_forward(u, 2 * d + 1, 1, d)
    return ops.conv2d_forward(u, params.cells[l][r], cache=cache)


def _cell_backward(cfg, params, l, r, u, g, cache):
    """Returns (grad wrt cell input, weight grad or None, bias grad or None)."""
    d = cfg.rates[l][r]
    if cfg.fusion_kind == "max_pool":
        return ops.maxpool2d_backward(u, g, 2 * d + 1, 1, d, cache=cache), None, None
    if cfg.fusion_kind == "avg_pool":
        return ops.avgpool2d_backward(u, g, 2 * d + 1, 1, d), None, None
    return ops.conv2d_backward(u, params.cells[l][r], g, cache=cache)


def fluff_forward(x: np.ndarray, cfg: FluffConfig, params: FluffParams, cache: dict | None = None) -> np.ndarray:
    """Run the block. Pass a dict as ``cache`` to keep intermediates for backward."""
    if x.ndim != 4 or x.shape[1] != cfg.c_pre:
        raise ValueError(f"block expects {cfg.c_pre} input channels, got shape {x.shape}")
    L, R = cfg.levels, cfg.branches
    keep = cache is not None
    inputs = [[None] * R for _ in range(L)]  # what each cell consumed
    outs = [[None] * R for _ in range(L)]  # X_{l,r}, pre-activation
    sub = {}
    for r in range(R):
        c = {} if keep else None
        u = ops.conv2d_forward(x, params.entry[r], cache=c)
        sub[("entry", r)] = c
        for l in range(L):
            inp = ops.relu_forward(u) if (l > 0 and cfg.inter_level_relu) else u
            c = {} if keep else None
            u = _cell_forward(cfg, params, l, r, inp, c)
            sub[("cell", l, r)] = c
            inputs[l][r] = inp
            outs[l][r] = u
    concat = ops.concat_channels([outs[l][r] for l in range(L) for r in range(R)])
    act = ops.relu_forward(concat)
    c_out = {} if keep else None
    y = ops.conv2d_forward(act, params.output, cache=c_out)
    if cfg.identity_shortcut:
        s = x
        c_sc = None
    else:
        c_sc = {} if keep else None
        s = ops.conv2d_forward(x, params.shortcut, cache=c_sc)
    z = ops.add_forward(y, s)
    out = ops.relu_forward(z)
    if keep:
        cache.update(inputs=inputs, outs=outs, concat=concat, act=act, z=z, sub=sub,
                     out_cache=c_out, sc_cache=c_sc)
    return out


def fluff_backward(x: np.ndarray, cfg: FluffConfig, params: FluffParams, grad_out: np.ndarray,
                   cache: dict | None = None):
    """Return ``(grad_x, grads)`` with ``grads`` keyed like :meth:`FluffParams.named`."""
    if not cache:
        cache = {}
        fluff_forward(x, cfg, params, cache=cache)
    if grad_out.shape != (x.shape[0], cfg.c_out) + x.shape[2:]:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match block output")
    L, R = cfg.levels, cfg.branches
    grads = {}
    gz = ops.relu_backward(cache["z"], grad_out)
    gy, gs = ops.add_backward(gz)
    gact, grads["output.weight"], grads["output.bias"] = ops.conv2d_backward(
        cache["act"], params.output, gy, cache=cache["out_cache"])
    if cfg.identity_shortcut:
        gx = gs.astype(np.float64)
    else:
        gxs, grads["shortcut.weight"], grads["shortcut.bias"] = ops.conv2d_backward(
            x, params.shortcut, gs, cache=cache["sc_cache"])
        gx = gxs.astype(np.float64)
    gconcat = ops.relu_backward(cache["concat"], gact)
    pieces = ops.concat_backward(gconcat, [cfg.branch_channels] * (L * R))
    for r in range(R):
        gu = None
        for l in range(L - 1, -1, -1):
            piece = pieces[l * R + r]
            gu = piece if gu is None else gu + piece
            gin, gw, gb = _cell_backward(cfg, params, l, r, cache["inputs"][l][r], gu, cache["sub"][("cell", l, r)])
            if gw is not None:
                grads[f"cell.{l}.{r}.weight"] = gw
                grads[f"cell.{l}.{r}.bias"] = gb
            if l > 0 and cfg.inter_level_relu:
                gu = ops.relu_backward(cache["outs"][l - 1][r], gin)
            else:
                gu = gin
        gxe, grads[f"entry.{r}.weight"], grads[f"entry.{r}.bias"] = ops.conv2d_backward(
            x, params.entry[r], gu, cache=cache["sub"][("entry", r)])
        gx += gxe
    return gx.astype(x.dtype), grads


def activation_signature(cache: dict) -> bytes:
    """Bytes identifying every ReLU on/off pattern and pool winner in a cached forward pass.

    Two forward passes with equal signatures lie on the same smooth piece
    of the block's piecewise-smooth map.
    """
    parts = [(cache["concat"] > 0).tobytes(), (cache["z"] > 0).tobytes()]
    for row in cache["outs"]:
        for u in row:
            parts.append((u > 0).tobytes())
    for key, c in sorted(cache["sub"].items(), key=lambda kv: repr(kv[0])):
        if c and "argmax" in c:
            parts.append(c["argmax"].tobytes())
    return b"".join(parts)
