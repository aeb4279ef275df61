"""Candidate calcification pixels, lesion grouping and annotation files."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .volume import DimensionMismatchError, RoiMask, Volume, check_same_grid

CANDIDATE_THRESHOLD_HU = 130

# in-plane 8-connectivity, nothing across slices
_STRUCT_2D = np.zeros((3, 3, 3), dtype=bool)
_STRUCT_2D[1] = True
_STRUCT_3D = np.ones((3, 3, 3), dtype=bool)


class Label(IntEnum):
    """Candidate labels. Values double as the patch-store label codes."""

    OTHER = 0
    CORONARY = 1
    AORTIC = 2
    UNLABELED = 3

    @property
    def annotation_name(self) -> str:
        return _ANNOTATION_NAMES[self]

    @classmethod
    def from_annotation(cls, name: str) -> "Label":
        try:
            return _ANNOTATION_LABELS[name]
        except KeyError:
            raise ValueError(f"unknown annotation label {name!r}") from None


_ANNOTATION_NAMES = {
    Label.OTHER: "other",
    Label.CORONARY: "coronary",
    Label.AORTIC: "aortic",
    Label.UNLABELED: "unlabeled",
}
_ANNOTATION_LABELS = {v: k for k, v in _ANNOTATION_NAMES.items()}


class CandidatePixel(NamedTuple):
    coord: tuple[int, int, int]
    hu: int
    label: Label = Label.UNLABELED


@dataclass
class Lesion:
    """A connected group of candidate voxels.

    ``slice_areas`` maps slice index z to the in-slice area in mm^2.
    """

    id: int
    voxels: list[tuple[int, int, int]]
    slice_areas: dict[int, float]
    max_hu: int
    label: Label = Label.UNLABELED

    @property
    def area(self) -> float:
        return float(sum(self.slice_areas.values()))

    @property
    def slice_index(self) -> int:
        """Lowest slice touched (the only one for per-slice lesions)."""
        return min(self.slice_areas)


@dataclass
class AnnotatedLesion:
    """One entry of a reference annotation file."""

    voxels: list[tuple[int, int, int]]
    label: Label
    extra: dict = field(default_factory=dict)


def threshold_candidates(vol: Volume, mask: RoiMask, thr: int = CANDIDATE_THRESHOLD_HU) -> list[CandidatePixel]:
    """All voxels with ``hu >= thr`` inside the mask, in (z, y, x) scan order."""
    check_same_grid(vol, mask)
    hit = (vol.data >= thr) & mask.bits
    zs, ys, xs = np.nonzero(hit)  # C order == z, then y, then x ascending
    hus = vol.data[zs, ys, xs]
    return [
        CandidatePixel((int(x), int(y), int(z)), int(h))
        for x, y, z, h in zip(xs, ys, zs, hus)
    ]


def _components(cands: Sequence[CandidatePixel], dims, spacing, structure) -> list[Lesion]:
    if not cands:
        return []
    nx, ny, nz = dims
    coords = np.array([c.coord for c in cands], dtype=np.int64)
    if (coords < 0).any() or (coords >= np.array([nx, ny, nz])).any():
        raise DimensionMismatchError(f"candidate coordinates fall outside dims {tuple(dims)}")
    grid = np.zeros((nz, ny, nx), dtype=bool)
    grid[coords[:, 2], coords[:, 1], coords[:, 0]] = True
    labels, _ = ndimage.label(grid, structure=structure)
    comp = labels[coords[:, 2], coords[:, 1], coords[:, 0]]
    # ndimage numbers components by first voxel in C (z, y, x) scan order
    order = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2], comp))
    pixel_area = spacing[0] * spacing[1]

    lesions: list[Lesion] = []
    start = 0
    while start < len(order):
        stop = start
        cid = comp[order[start]]
        while stop < len(order) and comp[order[stop]] == cid:
            stop += 1
        members = [cands[i] for i in order[start:stop]]
        per_slice = Counter(m.coord[2] for m in members)
        labels_here = Counter(m.label for m in members)
        # majority label; ties resolved toward the lower code
        label = min(labels_here, key=lambda lab: (-labels_here[lab], int(lab)))
        lesions.append(
            Lesion(
                id=len(lesions),
                voxels=[m.coord for m in members],
                slice_areas={z: n * pixel_area for z, n in sorted(per_slice.items())},
                max_hu=max(m.hu for m in members),
                label=label,
            )
        )
        start = stop
    return lesions


def connected_components_2d(
    cands: Sequence[CandidatePixel], dims, spacing, min_area: float = 0.0
) -> list[Lesion]:
    """Per-slice 8-connected lesions, as scored by Agatston.

    Components with an area below ``min_area`` (mm^2) are dropped; the
    default keeps everything.
    """
    lesions = _components(cands, dims, spacing, _STRUCT_2D)
    if min_area > 0:
        lesions = [les for les in lesions if les.area >= min_area]
        for i, les in enumerate(lesions):
            les.id = i
    return lesions


def connected_components_3d(
    cands: Sequence[CandidatePixel], dims, spacing=(1.0, 1.0, 1.0)
) -> list[Lesion]:
    """26-connected lesions across slices; used for lesion-level matching."""
    return _components(cands, dims, spacing, _STRUCT_3D)


# -- annotations ----------------------------------------------------------------


class AnnotationFormatError(ValueError):
    pass


def load_annotations(path) -> list[AnnotatedLesion]:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AnnotationFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise AnnotationFormatError(f"{path}: annotation file must hold a JSON list")
    out = []
    for entry in raw:
        try:
            voxels = [tuple(int(v) for v in vox) for vox in entry["voxels"]]
            label = Label.from_annotation(entry["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationFormatError(f"{path}: malformed annotation entry ({exc})") from exc
        if any(len(v) != 3 for v in voxels):
            raise AnnotationFormatError(f"{path}: voxel coordinates must be [x, y, z] triples")
        extra = {k: v for k, v in entry.items() if k not in ("voxels", "label")}
        out.append(AnnotatedLesion(voxels, label, extra))
    return out


def save_annotations(lesions: Iterable[AnnotatedLesion], path) -> None:
    payload = []
    for les in lesions:
        entry = {"voxels": [list(v) for v in les.voxels], "label": les.label.annotation_name}
        entry.update(les.extra)
        payload.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def check_annotations_in_grid(annotations: Iterable[AnnotatedLesion], dims) -> None:
    nx, ny, nz = dims
    for les in annotations:
        for x, y, z in les.voxels:
            if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
                raise DimensionMismatchError(f"annotated voxel {(x, y, z)} outside dims {tuple(dims)}")


def label_candidates(
    cands: Sequence[CandidatePixel], annotations: Iterable[AnnotatedLesion], dims
) -> list[CandidatePixel]:
    """Give each candidate its annotated label; unannotated ones become OTHER."""
    annotations = list(annotations)
    check_annotations_in_grid(annotations, dims)
    lookup = {}
    for les in annotations:
        for vox in les.voxels:
            lookup[vox] = les.label
    return [c._replace(label=lookup.get(c.coord, Label.OTHER)) for c in cands]


def annotated_lesions_as_lesions(
    vol: Volume, annotations: Iterable[AnnotatedLesion]
) -> list[Lesion]:
    """Turn annotation entries into Lesion records with HU read from ``vol``."""
    sx, sy, _ = vol.spacing
    out = []
    for i, ann in enumerate(annotations):
        per_slice = Counter(v[2] for v in ann.voxels)
        out.append(
            Lesion(
                id=i,
                voxels=list(ann.voxels),
                slice_areas={z: n * sx * sy for z, n in sorted(per_slice.items())},
                max_hu=max(vol[v] for v in ann.voxels),
                label=ann.label,
            )
        )
    return out


def coronary_candidates(vol: Volume, annotations: Iterable[AnnotatedLesion]) -> list[CandidatePixel]:
    """Coronary-annotated voxels as candidate pixels, in (z, y, x) order."""
    voxels = sorted(
        {v for les in annotations if les.label == Label.CORONARY for v in les.voxels},
        key=lambda v: (v[2], v[1], v[0]),
    )
    return [CandidatePixel(v, vol[v], Label.CORONARY) for v in voxels]
