"""Synthetic non-contrast cardiac CT phantoms with exact lesion ground truth.

Geometry is given in voxel index units ``(x, y, z)``. A phantom holds a
body of soft tissue, a blood-pool ellipsoid (the heart), a vertical aorta
tube, a few bright bones outside the cardiac ROI, and three kinds of
calcification:

* coronary: compact in-slice blobs in a shell around the heart surface,
  kept well away from the aorta;
* aortic: thin arcs on the aorta wall;
* noise specks: isolated single voxels anywhere in the ROI.

Non-lesion voxels are clamped to 125 HU (bones excepted, and they lie
outside the ROI), so thresholding at 130 HU inside the ROI recovers
exactly the stamped lesion voxels.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .candidates import AnnotatedLesion, Label, save_annotations, load_annotations
from .scoring import RISK_CLASSES, density_factor, reference_score
from .volume import RoiMask, Volume, load_volume, save_mask, save_volume

NON_LESION_CAP_HU = 125
RHO_BANDS = ((150, 199), (200, 299), (300, 399), (400, 800))

# Agatston targets drawn inside each class, away from the class edges,
# with the largest coronary lesion allowed for that class. Class E only
# uses the two densest bands to keep its voxel count manageable.
CLASS_PLANS = {
    "B": (1.5, 8.0, 8),
    "C": (18.0, 80.0, 30),
    "D": (130.0, 350.0, 45),
    "E": (450.0, 700.0, 80),
}


class PhantomPlanError(ValueError):
    """The lesion plan does not fit the phantom geometry."""


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (160, 160, 24)
    spacing: tuple[float, float, float] = (0.5, 0.5, 3.0)
    tissue_hu: float = 30.0
    noise_sd: float = 15.0
    heart_center: tuple[float, float, float] = (84.0, 92.0, 11.5)
    heart_radii: tuple[float, float, float] = (50.0, 42.0, 13.0)
    heart_hu: float = 45.0
    aorta_center: tuple[float, float] = (84.0, 26.0)
    aorta_radius: float = 11.0
    aorta_hu: float = 45.0
    roi_margin: float = 6.0
    coronary_count: tuple[int, int] = (1, 6)
    coronary_voxels: tuple[int, int] = (2, 40)
    coronary_hu: tuple[int, int] = (150, 800)
    aortic_count: tuple[int, int] = (0, 4)
    aortic_voxels: tuple[int, int] = (6, 24)
    aortic_hu: tuple[int, int] = (150, 800)
    noise_count: tuple[int, int] = (0, 8)
    noise_hu: tuple[int, int] = (130, 300)
    # explicit ((n_voxels, max_hu), ...) replaces the random coronary draw
    coronary_plan: tuple[tuple[int, int], ...] | None = None
    bone_count: int = 6
    aorta_clearance: float = 6.0
    lesion_gap: int = 3


@dataclass
class GroundTruth:
    lesions: list[AnnotatedLesion]
    mask: RoiMask
    reference_score: float
    risk_class: str
    seed: int = 0

    def by_label(self, label: Label) -> list[AnnotatedLesion]:
        return [les for les in self.lesions if les.label == label]


@dataclass
class _Canvas:
    spec: PhantomSpec
    rng: np.random.Generator
    roi: np.ndarray
    blocked: np.ndarray
    hu: dict = field(default_factory=dict)

    def free(self, voxels) -> bool:
        nz, ny, nx = self.roi.shape
        for x, y, z in voxels:
            if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
                return False
            if not self.roi[z, y, x] or self.blocked[z, y, x]:
                return False
        return True

    def claim(self, voxels, values) -> None:
        g = self.spec.lesion_gap
        nz, ny, nx = self.roi.shape
        for (x, y, z), v in zip(voxels, values):
            self.hu[(x, y, z)] = int(v)
            self.blocked[max(z - 1, 0) : z + 2, max(y - g, 0) : y + g + 1, max(x - g, 0) : x + g + 1] = True


def _ellipsoid(shape, center, radii) -> np.ndarray:
    nz, ny, nx = shape
    z, y, x = np.ogrid[:nz, :ny, :nx]
    cx, cy, cz = center
    rx, ry, rz = radii
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def _disk(shape, center, radius) -> np.ndarray:
    nz, ny, nx = shape
    y, x = np.ogrid[:ny, :nx]
    inside = (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius**2
    return np.broadcast_to(inside, (nz, ny, nx))


def _check_geometry(spec: PhantomSpec) -> None:
    nx, ny, nz = spec.dims
    cx, cy, cz = spec.heart_center
    rx, ry, rz = spec.heart_radii
    m = spec.roi_margin
    if min(rx, ry) < 10 or rz < 1:
        raise PhantomPlanError(f"heart radii {spec.heart_radii} too small to host coronary lesions")
    if spec.aorta_radius < 4:
        raise PhantomPlanError(f"aorta radius {spec.aorta_radius} too small for wall lesions")
    if cx - rx - m < 0 or cx + rx + m > nx - 1 or cy - ry - m < 0 or cy + ry + m > ny - 1:
        raise PhantomPlanError("heart ellipsoid plus ROI margin does not fit in the volume")
    ax, ay = spec.aorta_center
    ar = spec.aorta_radius + 4
    if ax - ar < 0 or ax + ar > nx - 1 or ay - ar < 0 or ay + ar > ny - 1:
        raise PhantomPlanError("aorta tube does not fit in the volume")
    if math.hypot(ax - cx, ay - cy) < spec.aorta_radius + max(rx, ry) * 0.5:
        raise PhantomPlanError("aorta overlaps the heart")


def _grow_blob(seed_xy, n, rng) -> list[tuple[int, int]]:
    """Compact 8-connected blob of n pixels grown outward from a seed."""
    sx, sy = seed_xy
    blob = [(sx, sy)]
    members = {(sx, sy)}
    jitter = {}
    while len(blob) < n:
        best, best_key = None, None
        for bx, by in blob:
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    q = (bx + dx, by + dy)
                    if q in members:
                        continue
                    if q not in jitter:
                        jitter[q] = rng.uniform(0.0, 0.75)
                    key = math.hypot(q[0] - sx, q[1] - sy) + jitter[q]
                    if best_key is None or key < best_key:
                        best, best_key = q, key
        blob.append(best)
        members.add(best)
    return blob


def _blob_values(pixels, seed_xy, max_hu, rng) -> list[int]:
    """Peak at the seed, falling off toward the rim, never below 131 HU."""
    floor = max(131.0, 0.55 * max_hu)
    d = np.array([math.hypot(x - seed_xy[0], y - seed_xy[1]) for x, y in pixels])
    span = max_hu - floor
    vals = floor + span * (1.0 - d / (d.max() + 1.0)) + rng.normal(0.0, 0.05 * span + 1e-9, len(d))
    vals = np.clip(np.round(vals), floor, max_hu)
    vals[0] = max_hu
    return [int(v) for v in vals]


def _draw_hu(rng, lo_hi, band: int | None = None) -> int:
    lo, hi = lo_hi
    if band is not None:
        blo, bhi = RHO_BANDS[band]
        lo, hi = max(lo, blo), min(hi, bhi)
        if lo > hi:
            lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _place_coronary(canvas: _Canvas, n: int, max_hu: int) -> list[tuple[int, int, int]]:
    spec, rng = canvas.spec, canvas.rng
    cx, cy, cz = spec.heart_center
    rx, ry, rz = spec.heart_radii
    ax, ay = spec.aorta_center
    nz = spec.dims[2]
    slices = [z for z in range(nz) if abs(z - cz) / rz <= 0.85]
    if not slices:
        raise PhantomPlanError("no slice crosses the heart deeply enough for coronary lesions")
    for _ in range(400):
        z = int(rng.choice(slices))
        scale = math.sqrt(max(0.0, 1.0 - ((z - cz) / rz) ** 2))
        theta = rng.uniform(0.0, 2.0 * math.pi)
        rnorm = rng.uniform(0.96, 1.06)
        seed = (int(round(cx + rnorm * scale * rx * math.cos(theta))), int(round(cy + rnorm * scale * ry * math.sin(theta))))
        blob = _grow_blob(seed, n, rng)
        if min(math.hypot(x - ax, y - ay) for x, y in blob) < spec.aorta_radius + spec.aorta_clearance:
            continue
        voxels = [(x, y, z) for x, y in blob]
        if canvas.free(voxels):
            canvas.claim(voxels, _blob_values(blob, seed, max_hu, rng))
            return voxels
    raise PhantomPlanError(f"could not place a {n}-voxel coronary lesion")


def _place_aortic(canvas: _Canvas, n: int, max_hu: int) -> list[tuple[int, int, int]]:
    spec, rng = canvas.spec, canvas.rng
    ax, ay = spec.aorta_center
    r = spec.aorta_radius
    nx, ny, nz = spec.dims
    y, x = np.mgrid[:ny, :nx]
    dist = np.hypot(x - ax, y - ay)
    ring = np.argwhere((dist >= r - 1.0) & (dist <= r + 0.5))  # (y, x) rows
    angles = np.arctan2(ring[:, 0] - ay, ring[:, 1] - ax)
    for _ in range(200):
        z = int(rng.integers(0, nz))
        start = rng.uniform(-math.pi, math.pi)
        order = np.argsort(np.mod(angles - start, 2.0 * math.pi), kind="stable")
        arc = [(int(ring[i, 1]), int(ring[i, 0])) for i in order[:n]]
        grid = np.zeros((ny, nx), dtype=bool)
        grid[[p[1] for p in arc], [p[0] for p in arc]] = True
        if ndimage.label(grid, structure=np.ones((3, 3)))[1] != 1:
            continue
        voxels = [(px, py, z) for px, py in arc]
        if canvas.free(voxels):
            # brightest in the middle of the arc
            mid = arc[len(arc) // 2]
            ordered = [mid] + [p for p in arc if p != mid]
            vals = dict(zip(ordered, _blob_values(ordered, mid, max_hu, rng)))
            canvas.claim(voxels, [vals[p] for p in arc])
            return voxels
    raise PhantomPlanError(f"could not place a {n}-voxel aortic lesion")


def _place_speck(canvas: _Canvas, hu: int) -> list[tuple[int, int, int]]:
    spots = np.argwhere(canvas.roi & ~canvas.blocked)
    if not len(spots):
        raise PhantomPlanError("no room left in the ROI for a noise speck")
    z, y, x = (int(v) for v in spots[canvas.rng.integers(0, len(spots))])
    canvas.claim([(x, y, z)], [hu])
    return [(x, y, z)]


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, RoiMask, GroundTruth]:
    """Build one phantom; identical specs give bit-identical output."""
    _check_geometry(spec)
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)

    body = _ellipsoid(shape, (nx / 2 - 0.5, ny / 2 - 0.5, (nz - 1) / 2), (nx * 0.49, ny * 0.47, nz * 10.0))
    heart = _ellipsoid(shape, spec.heart_center, spec.heart_radii)
    aorta = _disk(shape, spec.aorta_center, spec.aorta_radius)
    m = spec.roi_margin
    cx, cy, cz = spec.heart_center
    rx, ry, rz = spec.heart_radii
    roi = _ellipsoid(shape, spec.heart_center, (rx + m, ry + m, rz + 1.0)) | _disk(
        shape, spec.aorta_center, spec.aorta_radius + 4.0
    )

    img = np.full(shape, spec.tissue_hu)
    img[heart] = spec.heart_hu
    img[aorta] = spec.aorta_hu
    img += rng.normal(0.0, spec.noise_sd, shape)
    img[~body] = -1000.0 + rng.normal(0.0, 5.0, int((~body).sum()))
    img = np.minimum(img, NON_LESION_CAP_HU)

    # bones: bright disks inside the body but clear of the ROI
    clear = ~ndimage.binary_dilation(roi[nz // 2], iterations=4) & body[nz // 2]
    spots = np.argwhere(clear)
    for _ in range(spec.bone_count if len(spots) else 0):
        by, bx = spots[rng.integers(0, len(spots))]
        radius = rng.uniform(2.5, 4.5)
        bone = _disk(shape, (bx, by), radius) & ~roi & body
        img[bone] = rng.uniform(450, 900)

    canvas = _Canvas(spec, rng, roi, np.zeros(shape, dtype=bool))
    lesions: list[AnnotatedLesion] = []

    if spec.coronary_plan is not None:
        plan = [(int(n), int(h)) for n, h in spec.coronary_plan]
    else:
        count = int(rng.integers(spec.coronary_count[0], spec.coronary_count[1] + 1))
        plan = [
            (int(rng.integers(spec.coronary_voxels[0], spec.coronary_voxels[1] + 1)),
             _draw_hu(rng, spec.coronary_hu, int(rng.integers(0, 4))))
            for _ in range(count)
        ]
    for n, max_hu in plan:
        if n < 1 or max_hu < 130:
            raise PhantomPlanError(f"bad coronary lesion plan entry {(n, max_hu)}")
        lesions.append(AnnotatedLesion(_place_coronary(canvas, n, max_hu), Label.CORONARY))

    for _ in range(int(rng.integers(spec.aortic_count[0], spec.aortic_count[1] + 1))):
        n = int(rng.integers(spec.aortic_voxels[0], spec.aortic_voxels[1] + 1))
        hu = _draw_hu(rng, spec.aortic_hu, int(rng.integers(0, 4)))
        lesions.append(AnnotatedLesion(_place_aortic(canvas, n, hu), Label.AORTIC))

    for _ in range(int(rng.integers(spec.noise_count[0], spec.noise_count[1] + 1))):
        lesions.append(AnnotatedLesion(_place_speck(canvas, _draw_hu(rng, spec.noise_hu)), Label.OTHER))

    for (x, y, z), v in canvas.hu.items():
        img[z, y, x] = v

    vol = Volume(np.round(img).astype(np.int16), spec.spacing)
    mask = RoiMask(roi, spec.spacing)
    ref = reference_score(vol, lesions)
    return vol, mask, GroundTruth(lesions, mask, ref.agatston, ref.risk_class, spec.seed)


# -- cohorts ----------------------------------------------------------------------


def plan_coronary_lesions(target_class: str, rng: np.random.Generator, spec: PhantomSpec, band_offset: int = 0):
    """A coronary plan whose Agatston score lands inside ``target_class``.

    Density bands are cycled starting at ``band_offset`` so a cohort sees
    all four over its lesions.
    """
    if target_class not in RISK_CLASSES:
        raise ValueError(f"unknown risk class {target_class!r}")
    if target_class == "A":
        return ()
    lo, hi, nmax = CLASS_PLANS[target_class]
    pixel = spec.spacing[0] * spec.spacing[1] * spec.spacing[2] / 3.0
    target = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    plan: list[tuple[int, int]] = []
    score = 0.0
    misses = 0
    while score < target and misses < 50 and len(plan) < 40:
        bands = (2, 3) if target_class == "E" else (0, 1, 2, 3)
        band = bands[(band_offset + len(plan) + misses) % len(bands)]
        hu = _draw_hu(rng, spec.coronary_hu, band)
        per_voxel = pixel * density_factor(hu)
        n = int(rng.integers(2, nmax + 1))
        if score + n * per_voxel > hi:
            n = int((hi - score) // per_voxel)
        if n < 2:
            misses += 1
            continue
        plan.append((n, hu))
        score += n * per_voxel
    if not lo <= score <= hi:
        raise PhantomPlanError(f"could not plan a class {target_class} phantom (score {score:.2f})")
    return tuple(plan)


def phantom_id(i: int) -> str:
    return f"phantom_{i:04d}"


def generate_cohort(
    n: int,
    base_seed: int = 0,
    class_mix: Sequence[str] | None = None,
    template: PhantomSpec | None = None,
    threads: int = 1,
):
    """``n`` phantoms with seeds ``base_seed + i``.

    ``class_mix`` lists target risk classes, cycled over the cohort; the
    default cycles A..E so every class is represented once ``n >= 5``.
    """
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    template = template or PhantomSpec()
    mix = list(class_mix) if class_mix else list(RISK_CLASSES)

    def build(i):
        seed = base_seed + i
        target = mix[i % len(mix)]
        plan_rng = np.random.default_rng([seed, 1])
        plan = plan_coronary_lesions(target, plan_rng, template, band_offset=i)
        return generate_phantom(replace(template, seed=seed, coronary_plan=plan))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(build, range(n)))
    return [build(i) for i in range(n)]


def write_cohort(cohort, out_dir, base_seed: int = 0) -> dict:
    """Write CTV / CTMSK / annotation files plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (vol, mask, gt) in enumerate(cohort):
        vid = phantom_id(i)
        files = {"volume": f"{vid}.ctv", "mask": f"{vid}.ctmsk", "annotations": f"{vid}.ann.json"}
        save_volume(vol, out / files["volume"])
        save_mask(mask, out / files["mask"])
        save_annotations(gt.lesions, out / files["annotations"])
        entries.append(
            {"id": vid, "seed": gt.seed, **files, "reference_score": gt.reference_score, "risk_class": gt.risk_class}
        )
    manifest = {"base_seed": base_seed, "count": len(entries), "volumes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_manifest(cohort_dir) -> dict:
    path = Path(cohort_dir) / "manifest.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_cohort_entry(cohort_dir, entry: dict):
    """(volume, mask, annotations) for one manifest entry."""
    from .volume import load_mask

    d = Path(cohort_dir)
    return load_volume(d / entry["volume"]), load_mask(d / entry["mask"]), load_annotations(d / entry["annotations"])
