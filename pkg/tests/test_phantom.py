import math
from dataclasses import replace

import numpy as np
import pytest

from cacscore.candidates import Label, load_annotations, threshold_candidates
from cacscore.phantom import (
    NON_LESION_CAP_HU,
    PhantomPlanError,
    PhantomSpec,
    generate_cohort,
    generate_phantom,
    load_cohort_entry,
    plan_coronary_lesions,
    read_manifest,
    write_cohort,
)
from cacscore.scoring import density_factor, reference_score

EMPTY = dict(coronary_plan=(), aortic_count=(0, 0), noise_count=(0, 0))


def test_zero_lesions():
    vol, mask, gt = generate_phantom(PhantomSpec(seed=3, **EMPTY))
    assert threshold_candidates(vol, mask) == []
    assert (gt.reference_score, gt.risk_class, gt.lesions) == (0.0, "A", [])


def test_single_ten_voxel_lesion_scores_five():
    vol, mask, gt = generate_phantom(PhantomSpec(seed=1, **{**EMPTY, "coronary_plan": ((10, 250),)}))
    (lesion,) = gt.lesions
    assert len(lesion.voxels) == 10 and len({z for _, _, z in lesion.voxels}) == 1
    assert max(vol[v] for v in lesion.voxels) == 250
    assert gt.reference_score == pytest.approx(5.0, abs=1e-12)
    assert gt.risk_class == "B"


def test_same_seed_bit_identical():
    a, ma, ga = generate_phantom(PhantomSpec(seed=42))
    b, mb, gb = generate_phantom(PhantomSpec(seed=42))
    assert a.data.tobytes() == b.data.tobytes() and ma == mb
    assert [les.voxels for les in ga.lesions] == [les.voxels for les in gb.lesions]
    c, _, _ = generate_phantom(PhantomSpec(seed=43))
    assert a.data.tobytes() != c.data.tobytes()


@pytest.mark.parametrize("seed", range(8))
def test_candidates_are_exactly_the_planned_voxels(seed):
    vol, mask, gt = generate_phantom(PhantomSpec(seed=seed))
    planned = {v for les in gt.lesions for v in les.voxels}
    assert {c.coord for c in threshold_candidates(vol, mask)} == planned
    assert all(mask.bits[z, y, x] for x, y, z in planned)
    off = np.ones(mask.bits.shape, dtype=bool)
    for x, y, z in planned:
        off[z, y, x] = False
    assert vol.data[mask.bits & off].max() <= NON_LESION_CAP_HU


@pytest.mark.parametrize("seed", range(8))
def test_lesion_geometry(seed):
    spec = PhantomSpec(seed=seed)
    _, _, gt = generate_phantom(spec)
    ax, ay = spec.aorta_center
    for les in gt.lesions:
        d = [math.hypot(x - ax, y - ay) for x, y, _ in les.voxels]
        if les.label == Label.CORONARY:
            assert min(d) - spec.aorta_radius >= 3
        elif les.label == Label.AORTIC:
            # touches the tube wall
            assert min(abs(r - spec.aorta_radius) for r in d) <= 1.0


def test_every_planned_lesion_peaks_at_or_above_150():
    for seed in range(6):
        vol, _, gt = generate_phantom(PhantomSpec(seed=seed, noise_count=(0, 0)))
        assert all(max(vol[v] for v in les.voxels) >= 150 for les in gt.lesions)


def test_reference_score_recomputes():
    vol, _, gt = generate_phantom(PhantomSpec(seed=9))
    assert reference_score(vol, gt.lesions).agatston == gt.reference_score


@pytest.mark.parametrize(
    "bad",
    [{"heart_radii": (5.0, 5.0, 13.0)}, {"aorta_radius": 2.0}, {"heart_center": (20.0, 92.0, 11.5)},
     {"aorta_center": (84.0, 80.0)}, {"coronary_plan": ((0, 250),)}, {"coronary_plan": ((5, 100),)}],
)
def test_unsatisfiable_plans(bad):
    with pytest.raises(PhantomPlanError):
        generate_phantom(replace(PhantomSpec(), **bad))


def test_plan_lands_in_class():
    spec = PhantomSpec()
    for cls in "BCDE":
        for seed in range(10):
            plan = plan_coronary_lesions(cls, np.random.default_rng(seed), spec, band_offset=seed)
            assert plan and all(n >= 2 and hu >= 150 for n, hu in plan)
    with pytest.raises(ValueError):
        plan_coronary_lesions("F", np.random.default_rng(0), spec)


def test_forced_classes_one_per_class():
    cohort = generate_cohort(5, base_seed=100, class_mix="ABCDE")
    assert [gt.risk_class for _, _, gt in cohort] == list("ABCDE")
    assert [gt.seed for _, _, gt in cohort] == list(range(100, 105))


def test_cohort_covers_all_density_bands():
    cohort = generate_cohort(10, base_seed=7)
    bands = {
        density_factor(max(vol[v] for v in les.voxels))
        for vol, _, gt in cohort
        for les in gt.by_label(Label.CORONARY)
    }
    assert bands == {1, 2, 3, 4}
    assert {gt.risk_class for _, _, gt in cohort} == set("ABCDE")


def test_threads_do_not_change_cohort():
    a = generate_cohort(4, base_seed=5, threads=1)
    b = generate_cohort(4, base_seed=5, threads=3)
    assert all(x[0].data.tobytes() == y[0].data.tobytes() for x, y in zip(a, b))


def test_cohort_size_checked():
    with pytest.raises(ValueError):
        generate_cohort(0)


def test_manifest_round_trip(tmp_path):
    m1 = write_cohort(generate_cohort(5, base_seed=11), tmp_path / "a", base_seed=11)
    write_cohort(generate_cohort(5, base_seed=11), tmp_path / "b", base_seed=11)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    manifest = read_manifest(tmp_path / "a")
    assert manifest == m1 and manifest["count"] == 5
    for entry in manifest["volumes"]:
        vol, mask, anns = load_cohort_entry(tmp_path / "a", entry)
        assert abs(reference_score(vol, anns).agatston - entry["reference_score"]) <= 1e-9
        assert anns == load_annotations(tmp_path / "a" / entry["annotations"])
        assert (tmp_path / "a" / entry["volume"]).read_bytes() == (tmp_path / "b" / entry["volume"]).read_bytes()
