"""Detection statistics and score agreement statistics.

Ratios whose denominator is zero are reported as ``None`` rather than
defaulted. Pearson and kappa raise :class:`UndefinedStatisticError` when
the inputs leave them undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .candidates import (
    AnnotatedLesion,
    CandidatePixel,
    Label,
    Lesion,
    annotated_lesions_as_lesions,
    connected_components_3d,
    label_candidates,
    threshold_candidates,
)
from .scoring import RISK_CLASSES, reference_score, risk_class, risk_index
from .volume import RoiMask, Volume, check_same_grid


class UndefinedStatisticError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    granularity: str = "pixel"

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")
        if self.granularity not in ("pixel", "lesion"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.granularity != self.granularity:
            raise ValueError("cannot add pixel and lesion counts")
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn, self.granularity
        )


class DetectionStats(NamedTuple):
    sensitivity: float | None
    specificity: float | None
    ppv: float | None


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def detection_stats(counts: ConfusionCounts) -> DetectionStats:
    return DetectionStats(
        _ratio(counts.tp, counts.tp + counts.fn),
        _ratio(counts.tn, counts.tn + counts.fp),
        _ratio(counts.tp, counts.tp + counts.fp),
    )


def mean_detection_stats(per_scan: Iterable[ConfusionCounts]) -> DetectionStats:
    """Average each statistic over the scans where it is defined."""
    stats = [detection_stats(c) for c in per_scan]

    def avg(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return DetectionStats(*(avg(col) for col in zip(*stats))) if stats else DetectionStats(None, None, None)


def pixel_confusion(candidates: Sequence[CandidatePixel], predicted: Iterable) -> ConfusionCounts:
    """Pixel-level counts over labeled candidates; coronary is the positive class."""
    predicted = {tuple(p) for p in predicted}
    tp = fp = tn = fn = 0
    for c in candidates:
        pos = c.label == Label.CORONARY
        hit = c.coord in predicted
        if pos and hit:
            tp += 1
        elif pos:
            fn += 1
        elif hit:
            fp += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn, "pixel")


def match_lesions(predicted: Iterable, reference: Sequence[Lesion], dims) -> ConfusionCounts:
    """Lesion-level counts.

    A reference coronary lesion is a TP when any of its voxels is predicted
    positive, else a FN. Predicted-positive voxels outside every reference
    coronary lesion are grouped 26-connected and each group is one FP.
    Reference non-coronary lesions without predicted voxels are TNs.
    """
    nx, ny, nz = dims
    predicted = {tuple(int(v) for v in p) for p in predicted}
    for x, y, z in predicted:
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise ValueError(f"predicted voxel {(x, y, z)} outside dims {tuple(dims)}")
    for les in reference:
        for x, y, z in les.voxels:
            if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
                raise ValueError(f"reference voxel {(x, y, z)} outside dims {tuple(dims)}")
    tp = fn = tn = 0
    coronary_voxels = set()
    for les in reference:
        vox = set(les.voxels)
        if les.label == Label.CORONARY:
            coronary_voxels |= vox
            if vox & predicted:
                tp += 1
            else:
                fn += 1
        elif not vox & predicted:
            tn += 1
    stray = sorted(predicted - coronary_voxels, key=lambda v: (v[2], v[1], v[0]))
    fp = len(connected_components_3d([CandidatePixel(v, 0) for v in stray], dims))
    return ConfusionCounts(tp, fp, tn, fn, "lesion")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1D sequences")
    if len(x) < 2:
        raise UndefinedStatisticError("pearson needs at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("pearson undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def agreement_table(reference: Sequence[str], predicted: Sequence[str]) -> np.ndarray:
    """5x5 counts, rows = reference class, columns = predicted class."""
    if len(reference) != len(predicted):
        raise ValueError("reference and predicted class lists differ in length")
    table = np.zeros((len(RISK_CLASSES), len(RISK_CLASSES)), dtype=np.int64)
    for r, p in zip(reference, predicted):
        table[risk_index(r), risk_index(p)] += 1
    return table


def weighted_kappa(table) -> float:
    """Linearly weighted Cohen's kappa, weights |i - j| / (k - 1)."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 2:
        raise ValueError(f"agreement table must be square k x k with k >= 2, got {t.shape}")
    if (t < 0).any():
        raise ValueError("agreement table counts must be nonnegative")
    total = t.sum()
    if total <= 0:
        raise UndefinedStatisticError("empty agreement table")
    k = t.shape[0]
    i, j = np.indices((k, k))
    w = np.abs(i - j) / (k - 1)
    observed = t / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    disagree_exp = float((w * expected).sum())
    if disagree_exp == 0:
        raise UndefinedStatisticError("kappa undefined: marginals leave no expected disagreement")
    return 1.0 - float((w * observed).sum()) / disagree_exp


def risk_accuracy(table) -> float:
    t = np.asarray(table, dtype=np.float64)
    total = t.sum()
    if total <= 0:
        raise UndefinedStatisticError("empty agreement table")
    return float(np.trace(t) / total)


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: list[tuple[float, float]] = field(default_factory=list)


def bland_altman(xs: Sequence[float], ys: Sequence[float]) -> BlandAltman:
    """Differences x - y, mean +/- 1.96 sample SD limits, (mean, diff) points."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("Bland-Altman needs at least two pairs")
    d = x - y
    mean_diff = float(d.mean())
    sd = float(d.std(ddof=1))
    pts = [(float(a), float(b)) for a, b in zip((x + y) / 2.0, d)]
    return BlandAltman(mean_diff, sd, mean_diff - 1.96 * sd, mean_diff + 1.96 * sd, pts)


# -- cohort evaluation ------------------------------------------------------------


@dataclass
class VolumeEvaluation:
    volume_id: str
    reference_score: float
    predicted_score: float
    pixel: ConfusionCounts
    lesion: ConfusionCounts

    @property
    def reference_class(self) -> str:
        return risk_class(self.reference_score)

    @property
    def predicted_class(self) -> str:
        return risk_class(self.predicted_score)

    def to_dict(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "reference_score": self.reference_score,
            "predicted_score": self.predicted_score,
            "reference_class": self.reference_class,
            "predicted_class": self.predicted_class,
            "pixel": _counts_dict(self.pixel),
            "lesion": _counts_dict(self.lesion),
        }


def _counts_dict(c: ConfusionCounts) -> dict:
    return {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}


def _stats_dict(s: DetectionStats) -> dict:
    return {"sensitivity": s.sensitivity, "specificity": s.specificity, "ppv": s.ppv}


def evaluate_volume(
    volume_id: str,
    vol: Volume,
    mask: RoiMask,
    annotations: Sequence[AnnotatedLesion],
    kept_pixels: Iterable,
    predicted_score: float,
) -> VolumeEvaluation:
    """Pixel and lesion counts for one volume against its annotations."""
    check_same_grid(vol, mask)
    annotations = list(annotations)
    kept = [tuple(int(v) for v in p) for p in kept_pixels]
    cands = label_candidates(threshold_candidates(vol, mask), annotations, vol.dims)
    pixel = pixel_confusion(cands, kept)
    lesion = match_lesions(kept, annotated_lesions_as_lesions(vol, annotations), vol.dims)
    ref = reference_score(vol, annotations).agatston
    return VolumeEvaluation(volume_id, ref, float(predicted_score), pixel, lesion)


def _guarded(fn, *args):
    try:
        return fn(*args)
    except UndefinedStatisticError:
        return None


def summarize(evaluations: Sequence[VolumeEvaluation]) -> dict:
    """Every cohort statistic, JSON-ready.

    Detection statistics are given pooled over all pixels / lesions and as
    the per-scan average. Bland-Altman differences are predicted minus
    reference. Undefined statistics are ``None``.
    """
    if not evaluations:
        raise ValueError("nothing to summarize")
    out: dict = {"n_volumes": len(evaluations)}
    for gran in ("pixel", "lesion"):
        counts = [getattr(e, gran) for e in evaluations]
        pooled = counts[0]
        for c in counts[1:]:
            pooled = pooled + c
        out[gran] = {
            "counts": _counts_dict(pooled),
            "pooled": _stats_dict(detection_stats(pooled)),
            "per_scan_mean": _stats_dict(mean_detection_stats(counts)),
        }
    pred = [e.predicted_score for e in evaluations]
    ref = [e.reference_score for e in evaluations]
    table = agreement_table([e.reference_class for e in evaluations], [e.predicted_class for e in evaluations])
    out["pearson"] = _guarded(pearson, pred, ref)
    out["weighted_kappa"] = _guarded(weighted_kappa, table)
    out["risk_accuracy"] = risk_accuracy(table)
    out["agreement_table"] = table.tolist()
    if len(evaluations) >= 2:
        ba = bland_altman(pred, ref)
        out["bland_altman"] = {
            "mean_diff": ba.mean_diff, "sd_diff": ba.sd_diff, "loa_low": ba.loa_low, "loa_high": ba.loa_high,
        }
    else:
        out["bland_altman"] = None
    out["volumes"] = [e.to_dict() for e in evaluations]
    return out
