"""CT volumes, ROI masks and their on-disk format.

Voxel arrays are stored with shape ``(nz, ny, nx)`` so that a C-ordered
buffer is x-fastest, matching the file layout. Coordinates handed around
the rest of the package are ``(x, y, z)`` index triples.

File layout (CTV / CTMSK)::

    8-byte magic   b"CTVOL\\0\\0\\x01"  (mask: b"CTMSK\\0\\0\\x01")
    header line    UTF-8 JSON {"dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz]} + b"\\n"
    payload        nx*ny*nz little-endian int16 (mask: uint8 0/1), x fastest, then y, then z
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_MIN = -1024
HU_MAX = 4095
AIR_HU = -1024

FORMAT_VERSION = 1
VOLUME_MAGIC = b"CTVOL\x00\x00"
MASK_MAGIC = b"CTMSK\x00\x00"


class VolumeFormatError(ValueError):
    """Base class for CTV / CTMSK decoding failures."""


class HeaderError(VolumeFormatError):
    """Bad magic or an unparseable / inconsistent JSON header."""


class SizeMismatchError(VolumeFormatError):
    """Payload length disagrees with the declared dims."""


class UnsupportedVersionError(VolumeFormatError):
    """Magic matches but the version byte is not one we read."""


class DimensionMismatchError(ValueError):
    """A volume and a mask (or coordinates) do not share a grid."""


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims!r}")
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing!r}")


@dataclass(frozen=True, eq=False)
class Volume:
    """A grid of HU intensities with anisotropic voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D (nz, ny, nx), got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(data.shape[::-1], spacing)
        data = np.clip(data, HU_MIN, HU_MAX).astype(np.int16)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts as ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def __getitem__(self, coord) -> int:
        x, y, z = coord
        return int(self.data[z, y, x])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RoiMask:
    """Boolean cardiac region of interest on the same grid as a Volume."""

    bits: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        if bits.ndim != 3:
            raise ValueError(f"mask bits must be 3D (nz, ny, nx), got shape {bits.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(bits.shape[::-1], spacing)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.bits.shape
        return nx, ny, nz

    def __eq__(self, other):
        if not isinstance(other, RoiMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.bits, other.bits)

    __hash__ = None


def check_same_grid(vol: Volume, mask: RoiMask) -> None:
    if vol.dims != mask.dims:
        raise DimensionMismatchError(f"volume dims {vol.dims} != mask dims {mask.dims}")


# -- file I/O -----------------------------------------------------------------


def _write(path, magic: bytes, dims, spacing, payload: bytes) -> None:
    header = json.dumps({"dims": list(dims), "spacing_mm": list(spacing)})
    with open(path, "wb") as fh:
        fh.write(magic + bytes([FORMAT_VERSION]))
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(payload)


def _read(path, magic: bytes, itemsize: int):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:7] != magic:
        raise HeaderError(f"{path}: bad magic, expected {magic[:5].decode()} file")
    if raw[7] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {raw[7]} (supported: {FORMAT_VERSION})")
    newline = raw.find(b"\n", 8)
    if newline < 0:
        raise HeaderError(f"{path}: header line is not newline-terminated")
    try:
        header = json.loads(raw[8:newline].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        _check_geometry(dims, spacing)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    payload = raw[newline + 1 :]
    nx, ny, nz = dims
    expected = nx * ny * nz * itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    return dims, spacing, payload


def save_volume(vol: Volume, path) -> None:
    _write(path, VOLUME_MAGIC, vol.dims, vol.spacing, vol.data.astype("<i2").tobytes())


def load_volume(path) -> Volume:
    """Read a CTV file. Intensities outside [-1024, 4095] are clamped."""
    (nx, ny, nz), spacing, payload = _read(path, VOLUME_MAGIC, 2)
    data = np.frombuffer(payload, dtype="<i2").reshape(nz, ny, nx)
    return Volume(data, spacing)


def save_mask(mask: RoiMask, path) -> None:
    _write(path, MASK_MAGIC, mask.dims, mask.spacing, mask.bits.astype(np.uint8).tobytes())


def load_mask(path) -> RoiMask:
    (nx, ny, nz), spacing, payload = _read(path, MASK_MAGIC, 1)
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(nz, ny, nx)
    if bits.max(initial=0) > 1:
        raise HeaderError(f"{path}: mask payload must contain only 0/1 bytes")
    return RoiMask(bits.astype(bool), spacing)


# -- geometry -----------------------------------------------------------------


def _nearest_source_index(n_out: int, out_step: float, in_step: float, n_in: int) -> np.ndarray:
    # output center (i + 0.5) * out_step mapped to fractional input index;
    # the epsilon pushes exact half-way cases to the lower index
    pos = (np.arange(n_out) + 0.5) * out_step / in_step - 0.5
    idx = np.ceil(pos - 0.5 - 1e-9).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_inplane(vol: Volume, target: float = 0.5) -> Volume:
    """Nearest-neighbour resampling of x and y to ``target`` mm; z is untouched.

    Every output voxel copies the input voxel whose centre is closest in
    physical coordinates, so no new intensity values are created.
    """
    if not target > 0:
        raise ValueError(f"target spacing must be > 0, got {target}")
    sx, sy, sz = vol.spacing
    if sx == target and sy == target:
        return vol
    nx, ny, _ = vol.dims
    out_nx = max(1, round(nx * sx / target))
    out_ny = max(1, round(ny * sy / target))
    ix = _nearest_source_index(out_nx, target, sx, nx)
    iy = _nearest_source_index(out_ny, target, sy, ny)
    data = vol.data[:, iy[:, None], ix[None, :]]
    return Volume(data, (float(target), float(target), sz))


def resample_mask_inplane(mask: RoiMask, target: float = 0.5) -> RoiMask:
    """Same sampling grid as :func:`resample_inplane`, for masks."""
    if not target > 0:
        raise ValueError(f"target spacing must be > 0, got {target}")
    sx, sy, sz = mask.spacing
    if sx == target and sy == target:
        return mask
    nx, ny, _ = mask.dims
    ix = _nearest_source_index(max(1, round(nx * sx / target)), target, sx, nx)
    iy = _nearest_source_index(max(1, round(ny * sy / target)), target, sy, ny)
    return RoiMask(mask.bits[:, iy[:, None], ix[None, :]], (float(target), float(target), sz))


def apply_mask(vol: Volume, mask: RoiMask) -> Volume:
    """Set everything outside the ROI to air (-1024 HU)."""
    check_same_grid(vol, mask)
    return Volume(np.where(mask.bits, vol.data, np.int16(AIR_HU)), vol.spacing)
