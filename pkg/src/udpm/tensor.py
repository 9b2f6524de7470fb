"""Numerical substrate: image tensors, seeded random streams, 2D DFT and the UDT1 format.

Operators elsewhere in the package work on plain ``numpy`` arrays whose last
two axes are (height, width).  :class:`ImageTensor` is the boxed form used at
API boundaries where the diffusion level matters (sampling, latents, files).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

RNG_ALGORITHM = "pcg64/ziggurat"

UDT_MAGIC = b"UDT1"
_UDT_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass(frozen=True)
class ImageTensor:
    """A (channels, height, width) real array with an optional diffusion level."""

    data: np.ndarray
    level: float | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"ImageTensor expects (C, H, W) data, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("ImageTensor data contains NaN or Inf")
        if self.level is not None and not 0.0 <= self.level <= 1.0:
            raise ValueError(f"level must lie in [0, 1], got {self.level}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_level(self, level: float | None) -> ImageTensor:
        return ImageTensor(self.data, level)


@dataclass
class RngStream:
    """Seeded PCG64 stream; standard normals come from numpy's ziggurat.

    ``(seed, stream)`` select an independent substream through
    ``SeedSequence(seed, spawn_key=(stream,))``.  The stream is single-owner:
    hand other threads a :meth:`split` instead of sharing it.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def algorithm(self) -> str:
        return RNG_ALGORITHM

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, stream: int) -> RngStream:
        """Fresh independent stream sharing this seed."""
        return RngStream(self.seed, stream)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        shape = tuple(int(s) for s in shape)
        if len(shape) == 0 or any(s <= 0 for s in shape):
            raise ValueError(f"shape must have positive dimensions, got {shape}")
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def randn(rng: RngStream, shape, dtype=np.float64) -> np.ndarray:
    """i.i.d. standard-normal array of ``shape`` drawn from ``rng``."""
    return rng.normal(tuple(shape), dtype=dtype)


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the last two axes, DC at index (0, 0)."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"dft2 needs a grid with height, width >= 1, got {x.shape}")
    return np.fft.fft2(x, axes=(-2, -1))


def idft2(spectrum: np.ndarray, real: bool = True) -> np.ndarray:
    """Inverse of :func:`dft2` (carries the 1/(H*W) factor)."""
    out = np.fft.ifft2(spectrum, axes=(-2, -1))
    return out.real if real else out


# UDT1: magic, u8 precision, u8 ndim, ndim x u32 dims, little-endian reals.

def write_udt(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    precision = 4 if array.dtype == np.float32 else 8
    if array.ndim > 255:
        raise ValueError("UDT1 supports at most 255 dimensions")
    fh.write(UDT_MAGIC)
    fh.write(struct.pack("<BB", precision, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_UDT_DTYPES[precision]).tobytes())


def read_udt(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != UDT_MAGIC:
        raise ValueError(f"not a UDT1 stream (magic {magic!r})")
    precision, ndim = struct.unpack("<BB", fh.read(2))
    if precision not in _UDT_DTYPES:
        raise ValueError(f"unsupported UDT1 precision tag {precision}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = _UDT_DTYPES[precision]
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated UDT1 payload")
    native = np.float32 if precision == 4 else np.float64
    return np.frombuffer(payload, dtype=dtype).astype(native).reshape(dims)


def udt_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_udt(buf, array)
    return buf.getvalue()


def udt_from_bytes(payload: bytes) -> np.ndarray:
    return read_udt(io.BytesIO(payload))


def save_udt(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_udt(fh, array)


def load_udt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_udt(fh)
