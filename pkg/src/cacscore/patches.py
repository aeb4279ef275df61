"""Axial 51x51 patches around candidate pixels and the on-disk patch store.

Store layout::

    magic         b"CACPDB\\x01"
    count         u64 little-endian
    count records of
        center    3 x u32 (x, y, z)
        label     u8  (0 other-negative, 1 coronary, 2 aortic, 3 unlabeled)
        values    2601 x f32, row-major 51x51 (rows = y, columns = x)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .candidates import (
    AnnotatedLesion,
    Label,
    check_annotations_in_grid,
    label_candidates,
    threshold_candidates,
)
from .volume import AIR_HU, RoiMask, Volume

PATCH_SIZE = 51
HALF = PATCH_SIZE // 2
DEGENERATE_STD = 1e-6

STORE_MAGIC = b"CACPDB\x01"
_RECORD = np.dtype(
    [("center", "<u4", (3,)), ("label", "u1"), ("values", "<f4", (PATCH_SIZE * PATCH_SIZE,))]
)


class PatchStoreFormatError(ValueError):
    pass


@dataclass
class Patch:
    values: np.ndarray
    center: tuple[int, int, int]
    label: Label = Label.UNLABELED
    raw_mean: float | None = None
    raw_std: float | None = None


def _check_center(vol: Volume, center) -> None:
    nx, ny, nz = vol.dims
    x, y, z = center
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"patch center {tuple(center)} outside volume dims {vol.dims}")


def extract_patch_array(vol: Volume, centers: Sequence) -> np.ndarray:
    """Raw HU windows for many centers at once, shape ``(n, 51, 51)``."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(centers), PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    if not len(centers):
        return out
    nx, ny, nz = vol.dims
    if (centers < 0).any() or (centers >= np.array([nx, ny, nz])).any():
        bad = centers[((centers < 0) | (centers >= np.array([nx, ny, nz]))).any(axis=1)][0]
        raise IndexError(f"patch center {tuple(bad)} outside volume dims {vol.dims}")
    padded = np.pad(vol.data, ((0, 0), (HALF, HALF), (HALF, HALF)), constant_values=AIR_HU)
    offs = np.arange(PATCH_SIZE)
    # padded index of window row r is (y - HALF + r) + HALF = y + r
    rows = centers[:, 1, None] + offs[None, :]
    cols = centers[:, 0, None] + offs[None, :]
    out[:] = padded[centers[:, 2, None, None], rows[:, :, None], cols[:, None, :]]
    return out


def extract_patch(vol: Volume, center) -> Patch:
    """51x51 window from the axial slice of ``center``, centered at (25, 25).

    Positions outside the volume are filled with -1024 HU.
    """
    _check_center(vol, center)
    values = extract_patch_array(vol, [center])[0]
    return Patch(values, tuple(int(c) for c in center))


def normalize_values(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-patch standardisation over the last two axes (population std)."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=(-2, -1), keepdims=True)
    std = values.std(axis=(-2, -1), keepdims=True)
    centred = values - mean
    scale = np.where(std > DEGENERATE_STD, std, 1.0)
    return centred / scale, mean[..., 0, 0], std[..., 0, 0]


def normalize_patch(p: Patch) -> Patch:
    values, mean, std = normalize_values(p.values)
    return Patch(values, p.center, p.label, float(mean), float(std))


class PatchStore:
    """Normalized patches, with center coordinates and label codes."""

    def __init__(self, values, centers, labels):
        values = np.asarray(values, dtype=np.float32).reshape(-1, PATCH_SIZE, PATCH_SIZE)
        centers = np.asarray(centers, dtype=np.uint32).reshape(-1, 3)
        labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        if not (len(values) == len(centers) == len(labels)):
            raise ValueError("values, centers and labels must have the same length")
        if labels.size and labels.max() > max(Label):
            raise ValueError(f"unknown label code {labels.max()}")
        self.values = values
        self.centers = centers
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, PatchStore):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.centers, other.centers)
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def __getitem__(self, i) -> Patch:
        return Patch(
            self.values[i].astype(np.float64),
            tuple(int(c) for c in self.centers[i]),
            Label(int(self.labels[i])),
        )

    def indices(self, label: Label) -> np.ndarray:
        return np.flatnonzero(self.labels == int(label))

    def counts(self) -> dict[Label, int]:
        return {lab: int((self.labels == int(lab)).sum()) for lab in Label}

    @classmethod
    def empty(cls) -> "PatchStore":
        return cls(np.zeros((0, PATCH_SIZE, PATCH_SIZE)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def concatenate(cls, stores: Iterable["PatchStore"]) -> "PatchStore":
        stores = list(stores)
        if not stores:
            return cls.empty()
        return cls(
            np.concatenate([s.values for s in stores]),
            np.concatenate([s.centers for s in stores]),
            np.concatenate([s.labels for s in stores]),
        )

    def save(self, path) -> None:
        records = np.empty(len(self), dtype=_RECORD)
        records["center"] = self.centers
        records["label"] = self.labels
        records["values"] = self.values.reshape(len(self), PATCH_SIZE * PATCH_SIZE)
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(np.uint64(len(self)).astype("<u8").tobytes())
            fh.write(records.tobytes())

    @classmethod
    def load(cls, path) -> "PatchStore":
        raw = Path(path).read_bytes()
        if raw[: len(STORE_MAGIC)] != STORE_MAGIC:
            raise PatchStoreFormatError(f"{path}: not a patch store (bad magic)")
        head = len(STORE_MAGIC) + 8
        if len(raw) < head:
            raise PatchStoreFormatError(f"{path}: truncated patch store header")
        count = int(np.frombuffer(raw, dtype="<u8", count=1, offset=len(STORE_MAGIC))[0])
        if len(raw) - head != count * _RECORD.itemsize:
            raise PatchStoreFormatError(
                f"{path}: {len(raw) - head} payload bytes for {count} records "
                f"of {_RECORD.itemsize} bytes"
            )
        records = np.frombuffer(raw, dtype=_RECORD, count=count, offset=head)
        return cls(
            records["values"].reshape(count, PATCH_SIZE, PATCH_SIZE),
            records["center"],
            records["label"],
        )


def build_patch_store(vol: Volume, annotations: Sequence[AnnotatedLesion], mask: RoiMask) -> PatchStore:
    """One normalized patch per candidate pixel, labeled from the annotations.

    Candidates outside every annotated lesion are labeled other-negative.
    """
    check_annotations_in_grid(annotations, vol.dims)
    cands = label_candidates(threshold_candidates(vol, mask), annotations, vol.dims)
    centers = [c.coord for c in cands]
    values, _, _ = normalize_values(extract_patch_array(vol, centers))
    return PatchStore(values, centers, [int(c.label) for c in cands])
