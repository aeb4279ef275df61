"""Agatston scoring, risk classes and whole-volume prediction."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .candidates import (
    AnnotatedLesion,
    CandidatePixel,
    Lesion,
    connected_components_2d,
    coronary_candidates,
    threshold_candidates,
)
from .patches import PATCH_SIZE, extract_patch_array, normalize_values
from .volume import RoiMask, Volume, check_same_grid

RISK_CLASSES = ("A", "B", "C", "D", "E")
RISK_BOUNDS = (0.0, 10.0, 100.0, 400.0)
REFERENCE_SLICE_MM = 3.0
DECISION_THRESHOLD = 0.5
PREDICT_CHUNK = 256


def density_factor(max_hu: float) -> int:
    """Agatston density weight from a lesion's peak intensity."""
    if max_hu < 130:
        raise ValueError(f"density factor undefined below 130 HU (got {max_hu})")
    if max_hu < 200:
        return 1
    if max_hu < 300:
        return 2
    if max_hu < 400:
        return 3
    return 4


def lesion_contribution(lesion: Lesion, slice_thickness: float) -> float:
    return lesion.area * density_factor(lesion.max_hu) * (slice_thickness / REFERENCE_SLICE_MM)


def agatston_score(lesions: Iterable[Lesion], slice_thickness: float) -> float:
    """Sum of area * density factor * (slice thickness / 3 mm) over per-slice lesions."""
    if not slice_thickness > 0:
        raise ValueError(f"slice thickness must be > 0, got {slice_thickness}")
    return float(sum(lesion_contribution(les, slice_thickness) for les in lesions))


def risk_class(score: float) -> str:
    """A for exactly 0, then half-open bands (0,10], (10,100], (100,400], >400."""
    if score < 0 or math.isnan(score):
        raise ValueError(f"Agatston score must be >= 0, got {score}")
    if score == 0:
        return "A"
    for cls, upper in zip(RISK_CLASSES[1:], RISK_BOUNDS[1:]):
        if score <= upper:
            return cls
    return "E"


def risk_index(cls: str) -> int:
    return RISK_CLASSES.index(cls)


@dataclass
class LesionScore:
    slice_index: int
    area_mm2: float
    max_hu: int
    density: int
    contribution: float
    voxels: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass
class ScoreReport:
    volume_id: str
    agatston: float
    risk_class: str
    lesions: list[LesionScore]
    classified_pixels: int = 0
    kept_pixels: list[tuple[int, int, int]] = field(default_factory=list)
    pcac_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "agatston": self.agatston,
            "risk_class": self.risk_class,
            "classified_pixels": self.classified_pixels,
            "pcac_stats": self.pcac_stats,
            "kept_pixels": [list(v) for v in self.kept_pixels],
            "lesions": [
                {
                    "slice_index": les.slice_index,
                    "area_mm2": les.area_mm2,
                    "max_hu": les.max_hu,
                    "density": les.density,
                    "contribution": les.contribution,
                    "voxels": [list(v) for v in les.voxels],
                }
                for les in self.lesions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def csv_line(self) -> str:
        return f"{self.volume_id},{self.agatston!r},{self.risk_class}"

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(
            volume_id=d["volume_id"],
            agatston=float(d["agatston"]),
            risk_class=d["risk_class"],
            classified_pixels=int(d.get("classified_pixels", 0)),
            pcac_stats=dict(d.get("pcac_stats", {})),
            kept_pixels=[tuple(v) for v in d.get("kept_pixels", [])],
            lesions=[
                LesionScore(
                    les["slice_index"], les["area_mm2"], les["max_hu"], les["density"],
                    les["contribution"], [tuple(v) for v in les.get("voxels", [])],
                )
                for les in d.get("lesions", [])
            ],
        )

    @classmethod
    def load(cls, path) -> "ScoreReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def score_lesions(volume_id: str, lesions: Sequence[Lesion], slice_thickness: float, **extra) -> ScoreReport:
    rows = [
        LesionScore(
            les.slice_index, les.area, les.max_hu, density_factor(les.max_hu),
            lesion_contribution(les, slice_thickness), list(les.voxels),
        )
        for les in lesions
    ]
    total = agatston_score(lesions, slice_thickness)
    return ScoreReport(volume_id, total, risk_class(total), rows, **extra)


def score_candidates(vol: Volume, cands: Sequence[CandidatePixel], volume_id: str = "", min_area: float = 0.0) -> ScoreReport:
    """Agatston over the per-slice components of an explicit pixel set."""
    lesions = connected_components_2d(cands, vol.dims, vol.spacing, min_area=min_area)
    return score_lesions(volume_id, lesions, vol.spacing[2], kept_pixels=[c.coord for c in cands])


def reference_score(vol: Volume, annotations: Iterable[AnnotatedLesion], volume_id: str = "", min_area: float = 0.0) -> ScoreReport:
    """Score the coronary-annotated voxels (no classifier involved)."""
    return score_candidates(vol, coronary_candidates(vol, annotations), volume_id, min_area)


class PixelClassifier(Protocol):
    input_size: int

    def predict_proba(self, patches: np.ndarray) -> np.ndarray: ...


class ConstantModel:
    """Stub classifier returning the same pCAC everywhere (plumbing checks)."""

    input_size = PATCH_SIZE

    def __init__(self, p: float):
        self.p = float(p)

    def predict_proba(self, patches: np.ndarray) -> np.ndarray:
        return np.full(len(patches), self.p)


def classify_candidates(model: PixelClassifier, vol: Volume, cands: Sequence[CandidatePixel], threads: int = 1) -> np.ndarray:
    """pCAC per candidate. Chunking is fixed, so threads only change scheduling."""
    if getattr(model, "input_size", PATCH_SIZE) != PATCH_SIZE:
        raise ValueError(f"model expects {model.input_size}x{model.input_size} patches, not {PATCH_SIZE}x{PATCH_SIZE}")
    coords = [c.coord for c in cands]
    chunks = [coords[i : i + PREDICT_CHUNK] for i in range(0, len(coords), PREDICT_CHUNK)]

    def run(chunk):
        values, _, _ = normalize_values(extract_patch_array(vol, chunk))
        return np.asarray(model.predict_proba(values), dtype=np.float64)

    if not chunks:
        return np.zeros(0)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def predict_volume(
    model: PixelClassifier,
    vol: Volume,
    mask: RoiMask,
    volume_id: str = "",
    threshold: float = DECISION_THRESHOLD,
    min_area: float = 0.0,
    threads: int = 1,
) -> ScoreReport:
    """Classify every candidate, keep pCAC > threshold, score the kept pixels.

    Each predicted lesion's density factor uses the peak HU over its kept
    pixels only.
    """
    check_same_grid(vol, mask)
    cands = threshold_candidates(vol, mask)
    probs = classify_candidates(model, vol, cands, threads=threads)
    kept = [c for c, p in zip(cands, probs) if p > threshold]
    stats = {"count": int(len(probs))}
    if len(probs):
        stats.update(mean=float(probs.mean()), min=float(probs.min()), max=float(probs.max()))
    lesions = connected_components_2d(kept, vol.dims, vol.spacing, min_area=min_area)
    return score_lesions(
        volume_id, lesions, vol.spacing[2],
        classified_pixels=len(cands), kept_pixels=[c.coord for c in kept], pcac_stats=stats,
    )
