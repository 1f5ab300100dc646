"""Forward/backward kernels on (b, c, h, w) numpy arrays.

Every kernel is dtype-preserving: float32 in gives float32 out, float64 in
gives float64 out. Reductions (the conv matmuls, pooling sums, bias
gradients) always accumulate in float64 and round once at the end, which
keeps results bit-reproducible and equal to a naive loop nest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACC = np.float64


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("need stride >= 1, dilation >= 1, padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def extent(self) -> int:
        return effective_extent(self.kernel_size, self.dilation)


def effective_extent(k: int, dilation: int) -> int:
    return k + (k - 1) * (dilation - 1)


def conv_output_size(n: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        raise ValueError(f"input size {n} too small for kernel {k} at dilation {dilation}, padding {padding}")
    return span // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _tap(xp: np.ndarray, i: int, j: int, oh: int, ow: int, stride: int, dilation: int) -> np.ndarray:
    """View of the input pixels read by kernel tap (i, j) for every output position."""
    r0, c0 = i * dilation, j * dilation
    return xp[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride]


def _im2col(x: np.ndarray, p: ConvParams, oh: int, ow: int) -> np.ndarray:
    """Columns of shape (c*kh*kw, b*oh*ow) in the accumulation dtype."""
    b, c = x.shape[:2]
    k = p.kernel_size
    if k == 1 and p.stride == 1 and p.padding == 0:
        return x.transpose(1, 0, 2, 3).reshape(c, -1).astype(ACC)
    xp = _pad(x, p.padding)
    cols = np.empty((c, k, k, b, oh, ow), dtype=ACC)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = _tap(xp, i, j, oh, ow, p.stride, p.dilation).transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * oh * ow)


def _check_conv(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"expected (b, c, h, w) input, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {p.in_channels}")
    if p.weight.shape[2] != p.weight.shape[3]:
        raise ValueError("only square kernels are supported")
    oh = conv_output_size(x.shape[2], p.kernel_size, p.stride, p.padding, p.dilation)
    ow = conv_output_size(x.shape[3], p.kernel_size, p.stride, p.padding, p.dilation)
    return oh, ow


def conv2d_forward(x: np.ndarray, p: ConvParams, cache: dict | None = None) -> np.ndarray:
    """Dilated 2-D cross-correlation with bias.

    If ``cache`` is given, the lowered input columns are stored in it so a
    following :func:`conv2d_backward` can skip recomputing them.
    """
    oh, ow = _check_conv(x, p)
    b = x.shape[0]
    cols = _im2col(x, p, oh, ow)
    w = p.weight.reshape(p.out_channels, -1).astype(ACC)
    out = w @ cols + p.bias.astype(ACC)[:, None]
    if cache is not None:
        cache["cols"] = cols
    return out.reshape(p.out_channels, b, oh, ow).transpose(1, 0, 2, 3).astype(x.dtype)


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, cache: dict | None = None):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    oh, ow = _check_conv(x, p)
    b, c, h, w_ = x.shape
    if grad_out.shape != (b, p.out_channels, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(b, p.out_channels, oh, ow)}")
    cols = cache["cols"] if cache and "cols" in cache else _im2col(x, p, oh, ow)
    g = grad_out.transpose(1, 0, 2, 3).reshape(p.out_channels, -1).astype(ACC)
    grad_w = (g @ cols.T).reshape(p.weight.shape).astype(p.weight.dtype)
    grad_b = g.sum(axis=1).astype(p.bias.dtype)

    wmat = p.weight.reshape(p.out_channels, -1).astype(ACC)
    gcols = wmat.T @ g
    k = p.kernel_size
    if k == 1 and p.stride == 1 and p.padding == 0:
        grad_x = gcols.reshape(c, b, h, w_).transpose(1, 0, 2, 3)
    else:
        gcols = gcols.reshape(c, k, k, b, oh, ow)
        gxp = np.zeros((b, c, h + 2 * p.padding, w_ + 2 * p.padding), dtype=ACC)
        for i in range(k):
            for j in range(k):
                _tap(gxp, i, j, oh, ow, p.stride, p.dilation)[...] += gcols[:, i, j].transpose(1, 0, 2, 3)
        grad_x = gxp[:, :, p.padding:p.padding + h, p.padding:p.padding + w_]
    return grad_x.astype(x.dtype), grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(xs) -> np.ndarray:
    xs = list(xs)
    if not xs:
        raise ValueError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {t.shape} with {ref}: batch and spatial dims must match")
    return np.concatenate(xs, axis=1)


def concat_backward(grad_out: np.ndarray, channels) -> list[np.ndarray]:
    """Split a gradient back into per-input pieces of the given channel counts."""
    if sum(channels) != grad_out.shape[1]:
        raise ValueError("channel counts do not add up to the concatenated width")
    bounds = np.cumsum(channels)[:-1]
    return np.split(grad_out, bounds, axis=1)


def add_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return a + b


def add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


def _pool_geometry(x: np.ndarray, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"expected (b, c, h, w) input, got shape {x.shape}")
    if padding >= kernel:
        raise ValueError("padding >= window leaves border windows with no real cells")
    return (conv_output_size(x.shape[2], kernel, stride, padding),
            conv_output_size(x.shape[3], kernel, stride, padding))


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0,
                      cache: dict | None = None) -> np.ndarray:
    """Max pooling; padded cells never win. Ties go to the first tap in row-major order."""
    oh, ow = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x, padding, -np.inf)
    out = np.full((x.shape[0], x.shape[1], oh, ow), -np.inf, dtype=x.dtype)
    arg = np.zeros(out.shape, dtype=np.int32)
    for i in range(kernel):
        for j in range(kernel):
            v = _tap(xp, i, j, oh, ow, stride, 1)
            better = v > out
            out = np.where(better, v, out)
            arg[better] = i * kernel + j
    if cache is not None:
        cache["argmax"] = arg
    return out


def maxpool2d_backward(x: np.ndarray, grad_out: np.ndarray, kernel: int, stride: int = 1,
                       padding: int = 0, cache: dict | None = None) -> np.ndarray:
    oh, ow = _pool_geometry(x, kernel, stride, padding)
    if cache and "argmax" in cache:
        arg = cache["argmax"]
    else:
        c = {}
        maxpool2d_forward(x, kernel, stride, padding, cache=c)
        arg = c["argmax"]
    b, ch, h, w = x.shape
    gxp = np.zeros((b, ch, h + 2 * padding, w + 2 * padding), dtype=ACC)
    for i in range(kernel):
        for j in range(kernel):
            _tap(gxp, i, j, oh, ow, stride, 1)[...] += np.where(arg == i * kernel + j, grad_out, 0)
    return gxp[:, :, padding:padding + h, padding:padding + w].astype(grad_out.dtype)


def _valid_counts(h: int, w: int, kernel: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    ones = _pad(np.ones((1, 1, h, w), dtype=ACC), padding)
    counts = np.zeros((1, 1, oh, ow), dtype=ACC)
    for i in range(kernel):
        for j in range(kernel):
            counts += _tap(ones, i, j, oh, ow, stride, 1)
    return counts


def avgpool2d_forward(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Average pooling that divides by the number of real (unpadded) cells."""
    oh, ow = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x, padding)
    acc = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=ACC)
    for i in range(kernel):
        for j in range(kernel):
            acc += _tap(xp, i, j, oh, ow, stride, 1)
    counts = _valid_counts(x.shape[2], x.shape[3], kernel, stride, padding, oh, ow)
    return (acc / counts).astype(x.dtype)


def avgpool2d_backward(x: np.ndarray, grad_out: np.ndarray, kernel: int, stride: int = 1,
                       padding: int = 0) -> np.ndarray:
    oh, ow = _pool_geometry(x, kernel, stride, padding)
    b, ch, h, w = x.shape
    g = grad_out.astype(ACC) / _valid_counts(h, w, kernel, stride, padding, oh, ow)
    gxp = np.zeros((b, ch, h + 2 * padding, w + 2 * padding), dtype=ACC)
    for i in range(kernel):
        for j in range(kernel):
            _tap(gxp, i, j, oh, ow, stride, 1)[...] += g
    return gxp[:, :, padding:padding + h, padding:padding + w].astype(grad_out.dtype)
