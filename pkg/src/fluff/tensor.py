"""Dense 4-D tensors, the on-disk tensor format, and seeded RNG.

Activations are plain ``numpy`` arrays in (batch, channel, height, width)
order; :class:`Tensor` pairs such an array with an optional gradient buffer
and is what gets written to disk.

File layout (all little-endian)::

    bytes 0..7    magic  b"FLUFTNSR"
    bytes 8..11   u32    version (1)
    bytes 12..27  4x u32 shape (b, c, h, w)
    bytes 28..    f32    payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLUFTNSR"
VERSION = 1
_HEADER = struct.Struct("<8sI4I")
_MAX_ELEMENTS = 2**40


class TensorFileError(ValueError):
    """Base class for malformed tensor files."""

    code = 1


class BadMagic(TensorFileError):
    code = 2


class VersionMismatch(TensorFileError):
    code = 3


class Truncated(TensorFileError):
    code = 4


class Tensor:
    """A 4-D float32 array with an optional gradient buffer.

    The shape is fixed at construction; ``reshape`` returns a new tensor.
    """

    __slots__ = ("_data", "grad")

    def __init__(self, data, grad=None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be 4-D, got shape {arr.shape}")
        self._data = np.ascontiguousarray(arr)
        if grad is not None:
            grad = np.asarray(grad, dtype=np.float32)
            if grad.shape != arr.shape:
                raise ValueError("grad shape must match data shape")
        self.grad = grad

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self._data.shape)

    @property
    def size(self) -> int:
        return int(self._data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        """In-place ``grad += g``; the only mutating operation on a tensor."""
        if g.shape != self._data.shape:
            raise ValueError(f"gradient shape {g.shape} != {self._data.shape}")
        if self.grad is None:
            self.zero_grad()
        self.grad += g

    def reshape(self, shape) -> "Tensor":
        return Tensor(self._data.reshape(shape).copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def tensor_new(shape, fill_value: float = 0.0) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ValueError("shape must have four dimensions")
    if any(d < 0 for d in shape):
        raise ValueError(f"negative dimension in {shape}")
    n = 1
    for d in shape:
        n *= d
    if n > _MAX_ELEMENTS:
        raise OverflowError(f"{shape} holds {n} elements, more than {_MAX_ELEMENTS}")
    return Tensor(np.full(shape, fill_value, dtype=np.float32))


def as_4d(arr: np.ndarray) -> np.ndarray:
    """Pad the shape of a lower-rank array with trailing ones."""
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError(f"cannot store {arr.ndim}-D array as a tensor")
    return arr.reshape(arr.shape + (1,) * (4 - arr.ndim))


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    data = as_4d(data)
    header = _HEADER.pack(MAGIC, VERSION, *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(buf[:8])!r}")
    if len(buf) < _HEADER.size:
        raise Truncated(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, *shape = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version} (expected {VERSION})")
    n = int(np.prod(shape, dtype=np.int64))
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * n:
        raise Truncated(f"payload has {len(payload)} bytes, shape {tuple(shape)} needs {4 * n}")
    if len(payload) > 4 * n:
        raise TensorFileError(f"{len(payload) - 4 * n} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4", count=n).astype(np.float32).reshape(shape)
    return Tensor(data)


def write_tensor(path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; numpy keeps this stream stable across platforms."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))
