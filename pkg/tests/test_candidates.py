import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacscore.candidates import (
    AnnotatedLesion,
    AnnotationFormatError,
    CandidatePixel,
    Label,
    connected_components_2d,
    connected_components_3d,
    label_candidates,
    load_annotations,
    save_annotations,
    threshold_candidates,
)
from cacscore.volume import DimensionMismatchError, RoiMask, Volume

from oracles import flood_fill_2d, flood_fill_3d


def _vol(data, spacing=(0.5, 0.5, 3.0)):
    return Volume(np.asarray(data), spacing)


def _full_mask(vol):
    return RoiMask(np.ones(vol.data.shape, dtype=bool), vol.spacing)


def test_uniform_volume_has_no_candidates():
    vol = _vol(np.zeros((2, 4, 4)))
    assert threshold_candidates(vol, _full_mask(vol)) == []


def test_130_is_a_candidate_129_is_not():
    data = np.zeros((1, 1, 2))
    data[0, 0] = [130, 129]
    vol = _vol(data)
    cands = threshold_candidates(vol, _full_mask(vol))
    assert [(c.coord, c.hu) for c in cands] == [((0, 0, 0), 130)]


def test_candidates_outside_mask_excluded():
    data = np.zeros((1, 2, 2))
    data[0, 1, 1] = 500
    vol = _vol(data)
    bits = np.ones((1, 2, 2), dtype=bool)
    bits[0, 1, 1] = False
    assert threshold_candidates(vol, RoiMask(bits, vol.spacing)) == []


def test_candidates_in_scan_order():
    data = np.zeros((2, 2, 2))
    data[data == 0] = 200
    vol = _vol(data)
    coords = [c.coord for c in threshold_candidates(vol, _full_mask(vol))]
    assert coords == sorted(coords, key=lambda v: (v[2], v[1], v[0]))


def test_mask_grid_mismatch():
    vol = _vol(np.zeros((1, 2, 2)))
    with pytest.raises(DimensionMismatchError):
        threshold_candidates(vol, RoiMask(np.ones((1, 3, 2))))


def _cands(coords, hu=200):
    return [CandidatePixel(c, hu) for c in coords]


def test_diagonal_pixels_form_one_lesion():
    lesions = connected_components_2d(_cands([(0, 0, 0), (1, 1, 0)]), (3, 3, 1), (0.5, 0.5, 3.0))
    assert len(lesions) == 1


def test_stacked_pixels_two_lesions_in_2d_one_in_3d():
    cands = _cands([(1, 1, 0), (1, 1, 1)])
    assert len(connected_components_2d(cands, (3, 3, 2), (0.5, 0.5, 3.0))) == 2
    assert len(connected_components_3d(cands, (3, 3, 2))) == 1


def test_ten_pixel_blob_area():
    coords = [(x, y, 0) for x in range(5) for y in range(2)]
    (les,) = connected_components_2d(_cands(coords), (5, 2, 1), (0.5, 0.5, 3.0))
    assert les.area == pytest.approx(2.5)
    assert les.slice_index == 0


def test_max_hu_and_ids():
    cands = [CandidatePixel((0, 0, 0), 150), CandidatePixel((1, 0, 0), 420), CandidatePixel((5, 5, 0), 133)]
    lesions = connected_components_2d(cands, (6, 6, 1), (1, 1, 1))
    assert [les.id for les in lesions] == [0, 1]
    assert sorted(les.max_hu for les in lesions) == [133, 420]


def test_empty_components():
    assert connected_components_2d([], (2, 2, 2), (1, 1, 1)) == []
    assert connected_components_3d([], (2, 2, 2)) == []


def test_min_area_filter():
    cands = _cands([(0, 0, 0), (1, 0, 0), (5, 5, 0)])
    lesions = connected_components_2d(cands, (6, 6, 1), (0.5, 0.5, 3.0), min_area=0.5)
    assert len(lesions) == 1 and lesions[0].area == pytest.approx(0.5)


def test_out_of_grid_coordinate():
    with pytest.raises(DimensionMismatchError):
        connected_components_2d(_cands([(3, 0, 0)]), (3, 3, 1), (1, 1, 1))


def test_component_label_majority():
    cands = [
        CandidatePixel((0, 0, 0), 200, Label.AORTIC),
        CandidatePixel((1, 0, 0), 200, Label.AORTIC),
        CandidatePixel((2, 0, 0), 200, Label.CORONARY),
    ]
    (les,) = connected_components_2d(cands, (3, 1, 1), (1, 1, 1))
    assert les.label == Label.AORTIC


voxel_sets = st.sets(st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(0, 3)), max_size=60)


@settings(max_examples=80, deadline=None)
@given(voxel_sets)
def test_components_match_flood_fill(voxels):
    cands = _cands(sorted(voxels))
    got2 = sorted(sorted(les.voxels) for les in connected_components_2d(cands, (8, 8, 4), (1, 1, 1)))
    assert got2 == sorted(sorted(g) for g in flood_fill_2d(voxels))
    got3 = sorted(sorted(les.voxels) for les in connected_components_3d(cands, (8, 8, 4)))
    assert got3 == sorted(sorted(g) for g in flood_fill_3d(voxels))


@settings(max_examples=50, deadline=None)
@given(voxel_sets)
def test_3d_is_coarser_and_partitions(voxels):
    cands = _cands(sorted(voxels))
    two = connected_components_2d(cands, (8, 8, 4), (1, 1, 1))
    three = connected_components_3d(cands, (8, 8, 4))
    assert len(three) <= len(two)
    assert sum(len(les.voxels) for les in three) == len(voxels)
    assert sum(len(les.voxels) for les in two) == len(voxels)


# -- annotations ------------------------------------------------------------------


def test_annotation_round_trip(tmp_path):
    anns = [
        AnnotatedLesion([(1, 2, 0), (2, 2, 0)], Label.CORONARY),
        AnnotatedLesion([(5, 5, 1)], Label.AORTIC, {"note": "arc"}),
        AnnotatedLesion([(0, 0, 0)], Label.OTHER),
    ]
    save_annotations(anns, tmp_path / "a.json")
    back = load_annotations(tmp_path / "a.json")
    assert [(a.voxels, a.label, a.extra) for a in back] == [(a.voxels, a.label, a.extra) for a in anns]


@pytest.mark.parametrize(
    "payload",
    ['{"not": "a list"}', '[{"voxels": [[1, 2]], "label": "coronary"}]', '[{"voxels": [], "label": "bone"}]', "[{"],
)
def test_malformed_annotations(tmp_path, payload):
    (tmp_path / "a.json").write_text(payload)
    with pytest.raises(AnnotationFormatError):
        load_annotations(tmp_path / "a.json")


def test_unannotated_candidate_is_other():
    cands = _cands([(0, 0, 0), (1, 1, 0)])
    anns = [AnnotatedLesion([(0, 0, 0)], Label.CORONARY)]
    labeled = label_candidates(cands, anns, (2, 2, 1))
    assert [c.label for c in labeled] == [Label.CORONARY, Label.OTHER]


def test_annotation_outside_grid():
    with pytest.raises(DimensionMismatchError):
        label_candidates([], [AnnotatedLesion([(9, 0, 0)], Label.CORONARY)], (2, 2, 1))
