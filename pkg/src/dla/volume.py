"""Volumes, label volumes and elementary voxel operations.

All arrays are stored with x varying fastest, then y, then z.  In numpy terms
a volume of dims ``(nx, ny, nz)`` is a C-ordered array of shape
``(nz, ny, nx)`` so that ``values.ravel()[x + nx * (y + ny * z)]`` is the
voxel at ``(x, y, z)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from dla.errors import (
    BadMagicError,
    NonFiniteValueError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VolumeFormatError,
)

__all__ = [
    "AIR_HU",
    "DEFAULT_SPACING_MM",
    "Image2D",
    "LABEL_CODES",
    "ROI",
    "Volume",
    "load_labels",
    "load_volume",
    "mip",
    "save_labels",
    "save_volume",
    "subtract",
    "threshold_mask",
]

AIR_HU = -1000.0
DEFAULT_SPACING_MM = 0.46

UNLABELED, VESSEL, BONE, SOFT = 0, 1, 2, 3
LABEL_CODES = {"unlabeled": UNLABELED, "vessel": VESSEL, "bone": BONE, "soft": SOFT}

_VOLUME_MAGIC = b"DLAV"
_LABEL_MAGIC = b"DLAL"
_FORMAT_VERSION = 1
_DTYPE_FLOAT32 = 1
_DTYPE_UINT8 = 2
# magic | version u16 | dtype u8 | reserved u8 | nx, ny, nz u32
_BASE_HEADER = struct.Struct("<4sHBB3I")
_SPACING = struct.Struct("<f")

_AXES = {"x": 2, "y": 1, "z": 0}


def _as_f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D grid of Hounsfield-unit values with isotropic spacing.

    Parameters
    ----------
    values : ndarray of shape (nz, ny, nx)
        Voxel values; converted to a read-only float32 array.
    spacing_mm : float, default=0.46
        Isotropic voxel size.  Rounded to float32 so that the value survives
        a save/load round trip unchanged.
    """

    values: np.ndarray
    spacing_mm: float = DEFAULT_SPACING_MM

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, order="C", copy=True)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeMismatchError(
                f"volume values must be a non-empty 3D array, got shape {values.shape}"
            )
        if not np.isfinite(values).all():
            raise NonFiniteValueError("volume contains NaN or Inf")
        spacing = _as_f32(self.spacing_mm)
        if not (np.isfinite(spacing) and spacing > 0):
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def n_voxels(self) -> int:
        return int(self.values.size)

    @classmethod
    def full(cls, dims, value=0.0, spacing_mm=DEFAULT_SPACING_MM) -> "Volume":
        nx, ny, nz = dims
        return cls(np.full((nz, ny, nx), value, dtype=np.float32), spacing_mm)

    def with_values(self, values) -> "Volume":
        return Volume(values, self.spacing_mm)

    def equals(self, other: "Volume") -> bool:
        """Bitwise equality of dims, spacing and payload."""
        return (
            self.shape == other.shape
            and self.spacing_mm == other.spacing_mm
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Image2D:
    """A 2D float image; ``intensities`` has shape (height, width)."""

    intensities: np.ndarray

    @property
    def width(self) -> int:
        return int(self.intensities.shape[1])

    @property
    def height(self) -> int:
        return int(self.intensities.shape[0])


@dataclass(frozen=True)
class ROI:
    """Axis-aligned box, inclusive ``lo`` and exclusive ``hi`` per axis."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    def __post_init__(self):
        for a, b in ((self.x0, self.x1), (self.y0, self.y1), (self.z0, self.z1)):
            if not (0 <= a < b):
                raise ValueError(f"invalid ROI bounds {self}")

    @classmethod
    def full(cls, shape) -> "ROI":
        nz, ny, nx = shape
        return cls(0, nx, 0, ny, 0, nz)

    @classmethod
    def parse(cls, text: str) -> "ROI":
        parts = [int(p) for p in text.replace(" ", "").split(",")]
        if len(parts) != 6:
            raise ValueError(f"ROI needs 6 integers x0,x1,y0,y1,z0,z1; got {text!r}")
        return cls(*parts)

    def __str__(self):
        return f"{self.x0},{self.x1},{self.y0},{self.y1},{self.z0},{self.z1}"

    @property
    def slices(self):
        return (slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def check_within(self, shape):
        nz, ny, nx = shape
        if self.x1 > nx or self.y1 > ny or self.z1 > nz:
            raise ShapeMismatchError(f"ROI {self} exceeds volume dims {(nx, ny, nz)}")

    def mask(self, shape) -> np.ndarray:
        self.check_within(shape)
        m = np.zeros(shape, dtype=bool)
        m[self.slices] = True
        return m

    def linear_indices(self, shape) -> np.ndarray:
        """Linear indices of ROI voxels in scan order."""
        self.check_within(shape)
        return np.flatnonzero(self.mask(shape))


def _check_same_grid(a: Volume, b: Volume, what="volumes"):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} have different dims: {a.dims} vs {b.dims}")
    if a.spacing_mm != b.spacing_mm:
        raise ShapeMismatchError(
            f"{what} have different spacing: {a.spacing_mm} vs {b.spacing_mm}"
        )


def _check_mask(mask: np.ndarray, shape, what="mask"):
    if mask.shape != tuple(shape):
        raise ShapeMismatchError(f"{what} shape {mask.shape} does not match {tuple(shape)}")


def subtract(fill: Volume, mask: Volume) -> Volume:
    """Voxelwise ``fill - mask`` (image-domain subtraction angiogram)."""
    _check_same_grid(fill, mask)
    return Volume(fill.values - mask.values, fill.spacing_mm)


def threshold_mask(v: Volume, lo: float, hi: float = np.inf) -> np.ndarray:
    """Boolean mask of voxels with ``lo <= value <= hi``."""
    if lo > hi:
        raise ValueError(f"threshold lo={lo} exceeds hi={hi}")
    return (v.values >= lo) & (v.values <= hi)


def mip(v: Volume, axis: str = "z", mask: Optional[np.ndarray] = None) -> Image2D:
    """Maximum-intensity projection along ``axis``.

    The image width runs along the first remaining axis and the height along
    the second, e.g. a z projection is ``nx`` wide and ``ny`` high.  Voxels
    outside ``mask`` count as air.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    values = v.values
    if mask is not None:
        _check_mask(mask, v.shape)
        values = np.where(mask, values, np.float32(AIR_HU))
    return Image2D(values.max(axis=_AXES[axis]))


# --------------------------------------------------------------------------
# file IO


def _write_chunks(path, chunks):
    path = os.fspath(path)
    with open(path, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


def save_volume(v: Volume, path) -> None:
    nx, ny, nz = v.dims
    header = _BASE_HEADER.pack(_VOLUME_MAGIC, _FORMAT_VERSION, _DTYPE_FLOAT32, 0, nx, ny, nz)
    payload = v.values.astype("<f4", copy=False).tobytes(order="C")
    _write_chunks(path, [header, _SPACING.pack(v.spacing_mm), payload])


def _read_header(raw: bytes, magic: bytes, dtype_code: int, path):
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < _BASE_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, dtype, _, nx, ny, nz = _BASE_HEADER.unpack_from(raw)
    if version != _FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    if dtype != dtype_code:
        raise VolumeFormatError(f"{path}: unexpected dtype code {dtype}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: empty dims {(nx, ny, nz)}")
    return nx, ny, nz


def load_volume(path) -> Volume:
    """Read a DLAV file.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    BadMagicError, TruncatedPayloadError, NonFiniteValueError
        For malformed content.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    nx, ny, nz = _read_header(raw, _VOLUME_MAGIC, _DTYPE_FLOAT32, path)
    offset = _BASE_HEADER.size + _SPACING.size
    if len(raw) < offset:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (spacing,) = _SPACING.unpack_from(raw, _BASE_HEADER.size)
    expected = nx * ny * nz * 4
    if len(raw) - offset != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(nz, ny, nx)
    if not np.isfinite(values).all():
        raise NonFiniteValueError(f"{path}: payload contains NaN or Inf")
    return Volume(values.astype(np.float32), spacing)


def save_labels(labels: np.ndarray, path) -> None:
    """Write a label array of shape (nz, ny, nx) as a DLAL file."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeMismatchError(f"labels must be 3D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > SOFT):
        raise ValueError("label codes must lie in {0, 1, 2, 3}")
    nz, ny, nx = labels.shape
    header = _BASE_HEADER.pack(_LABEL_MAGIC, _FORMAT_VERSION, _DTYPE_UINT8, 0, nx, ny, nz)
    _write_chunks(path, [header, labels.astype(np.uint8).tobytes(order="C")])


def load_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    nx, ny, nz = _read_header(raw, _LABEL_MAGIC, _DTYPE_UINT8, path)
    offset = _BASE_HEADER.size
    if len(raw) - offset != nx * ny * nz:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {nx * ny * nz}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(nz, ny, nx).copy()
    if labels.max(initial=0) > SOFT:
        raise VolumeFormatError(f"{path}: label code out of range")
    return labels
