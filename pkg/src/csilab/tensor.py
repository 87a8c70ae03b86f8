"""Dense 4-D tensors, complex matrices, and the CSIB binary tensor format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, NamedTuple

import numpy as np

MAGIC = b"CSIB"
VERSION = 1

# hard cap on element count; keeps n*c*h*w arithmetic safely inside int64
MAX_ELEMENTS = 1 << 40


class ShapeError(ValueError):
    """Incompatible or invalid tensor/matrix dimensions."""


class SizeError(ValueError):
    """Requested tensor would exceed the addressable element budget."""


class FormatError(ValueError):
    """Malformed CSIB stream: bad magic, version, width, or payload size."""


class Shape4(NamedTuple):
    """Extents in (sample, channel, height, width) order."""

    n: int
    c: int
    h: int
    w: int

    def validate(self) -> "Shape4":
        if any(int(e) < 1 for e in self):
            raise ShapeError(f"all extents must be >= 1, got {tuple(self)}")
        if self.count() > MAX_ELEMENTS:
            raise SizeError(f"element count {self.count()} exceeds limit {MAX_ELEMENTS}")
        return self

    def count(self) -> int:
        return int(self.n) * int(self.c) * int(self.h) * int(self.w)


@dataclass
class Tensor4:
    """Row-major (n, c, h, w) array of real scalars.

    Storage is float32 by default; float64 is used for gradient checking.
    Complex quantities are carried as two real channels (0 = real, 1 = imag).
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 axes, got {a.ndim}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        Shape4(*a.shape).validate()
        self.data = np.ascontiguousarray(a)

    @property
    def shape(self) -> Shape4:
        return Shape4(*self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def check_finite(self) -> "Tensor4":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor contains NaN or Inf")
        return self


def tensor_new(shape: Shape4, fill: float = 0.0, dtype=np.float32) -> Tensor4:
    shape = Shape4(*shape).validate()
    return Tensor4(np.full(shape, fill, dtype=dtype))


def tensor_map(a: Tensor4, op: Callable[[np.ndarray], np.ndarray]) -> Tensor4:
    out = np.asarray(op(a.data), dtype=a.dtype)
    if out.shape != a.data.shape:
        raise ShapeError("map must preserve shape")
    return Tensor4(out)


def tensor_zip(a: Tensor4, b: Tensor4, op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor4:
    if a.shape != b.shape:
        raise ShapeError(f"zip shape mismatch: {a.shape} vs {b.shape}")
    return Tensor4(np.asarray(op(a.data, b.data), dtype=a.dtype))


@dataclass
class Matrix:
    """Row-major 2-D array, real or complex; holds DFT factors and test fixtures."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ShapeError(f"Matrix needs 2 axes, got {a.ndim}")
        self.data = np.ascontiguousarray(a)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def mat_mul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"mat_mul inner dims differ: {a.cols} vs {b.rows}")
    return Matrix(a.data @ b.data)


_WIDTH_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_HEADER = struct.Struct("<4sII4I")


def _write_stream(fh: BinaryIO, t: Tensor4) -> None:
    width = t.data.dtype.itemsize
    n, c, h, w = t.shape
    fh.write(_HEADER.pack(MAGIC, VERSION, width, n, c, h, w))
    fh.write(np.ascontiguousarray(t.data, dtype=_WIDTH_DTYPES[width]).tobytes())


def _read_stream(fh: BinaryIO) -> Tensor4:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated CSIB header")
    magic, version, width, n, c, h, w = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CSIB version {version}")
    if width not in _WIDTH_DTYPES:
        raise FormatError(f"unsupported scalar width {width}")
    try:
        shape = Shape4(n, c, h, w).validate()
    except ValueError as e:
        raise FormatError(f"invalid extents in header: {e}") from e
    nbytes = shape.count() * width
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"payload is {len(payload)} bytes, header promises {nbytes}")
    arr = np.frombuffer(payload, dtype=_WIDTH_DTYPES[width]).reshape(shape)
    return Tensor4(arr.astype(arr.dtype.newbyteorder("=")))


def tensor_write(path, t: Tensor4) -> None:
    with open(path, "wb") as fh:
        _write_stream(fh, t)


def tensor_read(path) -> Tensor4:
    with open(path, "rb") as fh:
        return _read_stream(fh)
