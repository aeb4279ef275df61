import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cacscore.candidates import AnnotatedLesion, Label
from cacscore.patches import (
    PATCH_SIZE,
    PatchStore,
    PatchStoreFormatError,
    build_patch_store,
    extract_patch,
    extract_patch_array,
    normalize_patch,
    normalize_values,
)
from cacscore.volume import RoiMask, Volume


def test_constant_volume_interior_patch():
    vol = Volume(np.full((1, 60, 60), 100), (0.5, 0.5, 3.0))
    p = extract_patch(vol, (30, 30, 0))
    assert p.values.shape == (PATCH_SIZE, PATCH_SIZE)
    assert (p.values == 100).all()


def test_corner_patch_is_padded_with_air():
    data = np.arange(40 * 40).reshape(1, 40, 40) % 3000
    vol = Volume(data, (0.5, 0.5, 3.0))
    p = extract_patch(vol, (0, 0, 0)).values
    assert (p[:25, :] == -1024).all() and (p[:, :25] == -1024).all()
    np.testing.assert_array_equal(p[25:, 25:], data[0, :26, :26])


def test_patch_center_is_the_voxel():
    rng = np.random.default_rng(0)
    vol = Volume(rng.integers(-500, 1500, (3, 30, 20)), (0.5, 0.5, 3.0))
    for center in [(0, 0, 0), (19, 29, 2), (7, 11, 1)]:
        assert extract_patch(vol, center).values[25, 25] == vol[center]


def test_patch_rows_are_y():
    data = np.zeros((1, 60, 60))
    data[0, 30, 31] = 999  # y=30, x=31
    p = extract_patch(Volume(data, (1, 1, 1)), (30, 30, 0)).values
    assert p[25, 26] == 999


def test_out_of_range_center():
    vol = Volume(np.zeros((1, 5, 5)), (1, 1, 1))
    with pytest.raises(IndexError):
        extract_patch(vol, (5, 0, 0))
    with pytest.raises(IndexError):
        extract_patch_array(vol, [(0, 0, 0), (0, 0, 1)])


def test_batch_and_single_extraction_agree():
    rng = np.random.default_rng(3)
    vol = Volume(rng.integers(-1024, 2000, (2, 33, 41)), (1, 1, 1))
    centers = [(0, 0, 0), (40, 32, 1), (20, 10, 0)]
    batch = extract_patch_array(vol, centers)
    for c, b in zip(centers, batch):
        np.testing.assert_array_equal(extract_patch(vol, c).values, b)


def test_constant_patch_normalizes_to_zero():
    values, mean, std = normalize_values(np.full((51, 51), 77.0))
    assert (values == 0).all() and mean == 77 and std == 0


def test_two_level_patch_normalizes_to_plus_minus_one():
    # 51x51 has an odd pixel count, so an exact half/half split needs an even window
    even = np.tile([0.0, 2.0], 1300)
    values, mean, std = normalize_values(even.reshape(1, 50, 52))
    assert mean[0] == 1.0 and std[0] == 1.0
    assert set(np.unique(values)) == {-1.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (51, 51), elements=st.floats(-1024, 4095)))
def test_normalized_moments(raw):
    values, _, std = normalize_values(raw)
    if std > 1e-3:
        assert abs(values.mean()) < 1e-6
        assert abs(values.std() - 1.0) < 1e-6


def test_normalize_patch_keeps_raw_stats():
    p = extract_patch(Volume(np.arange(60 * 60).reshape(1, 60, 60) % 700, (1, 1, 1)), (30, 30, 0))
    n = normalize_patch(p)
    assert n.raw_mean == pytest.approx(p.values.mean())
    assert n.raw_std == pytest.approx(p.values.std())


def _lesion_volume():
    data = np.zeros((2, 40, 40), dtype=np.int16)
    for x in (10, 11, 12):
        data[1, 20, x] = 300
    return Volume(data, (0.5, 0.5, 3.0)), RoiMask(np.ones((2, 40, 40), dtype=bool), (0.5, 0.5, 3.0))


def test_store_from_single_coronary_lesion():
    vol, mask = _lesion_volume()
    store = build_patch_store(vol, [AnnotatedLesion([(10, 20, 1), (11, 20, 1), (12, 20, 1)], Label.CORONARY)], mask)
    assert len(store) == 3
    assert (store.labels == Label.CORONARY).all()
    assert store.centers.tolist() == [[10, 20, 1], [11, 20, 1], [12, 20, 1]]


def test_unannotated_candidate_stored_as_other():
    vol, mask = _lesion_volume()
    store = build_patch_store(vol, [AnnotatedLesion([(10, 20, 1)], Label.CORONARY)], mask)
    assert store.labels.tolist() == [Label.CORONARY, Label.OTHER, Label.OTHER]
    assert store.counts()[Label.OTHER] == 2


def _random_store(n, seed=0):
    rng = np.random.default_rng(seed)
    return PatchStore(
        rng.normal(size=(n, 51, 51)), rng.integers(0, 500, (n, 3)), rng.integers(0, 3, n)
    )


def test_store_round_trip_bit_exact(tmp_path):
    store = _random_store(17)
    store.save(tmp_path / "s.cacpdb")
    back = PatchStore.load(tmp_path / "s.cacpdb")
    assert back == store
    assert back.values.tobytes() == store.values.tobytes()
    back.save(tmp_path / "t.cacpdb")
    assert (tmp_path / "s.cacpdb").read_bytes() == (tmp_path / "t.cacpdb").read_bytes()


def test_empty_store_round_trip(tmp_path):
    PatchStore.empty().save(tmp_path / "e.cacpdb")
    assert len(PatchStore.load(tmp_path / "e.cacpdb")) == 0


def test_store_record_size(tmp_path):
    _random_store(3).save(tmp_path / "s.cacpdb")
    assert (tmp_path / "s.cacpdb").stat().st_size == 7 + 8 + 3 * (12 + 1 + 4 * 2601)


def test_store_format_errors(tmp_path):
    _random_store(2).save(tmp_path / "s.cacpdb")
    raw = (tmp_path / "s.cacpdb").read_bytes()
    (tmp_path / "short.cacpdb").write_bytes(raw[:-1])
    (tmp_path / "magic.cacpdb").write_bytes(b"NOTPDB!" + raw[7:])
    for name in ("short.cacpdb", "magic.cacpdb"):
        with pytest.raises(PatchStoreFormatError):
            PatchStore.load(tmp_path / name)


def test_concatenate_and_indices():
    a, b = _random_store(4, 1), _random_store(5, 2)
    both = PatchStore.concatenate([a, b])
    assert len(both) == 9
    assert both[5].center == b[1].center
    for lab in (Label.OTHER, Label.CORONARY, Label.AORTIC):
        assert len(both.indices(lab)) == both.counts()[lab]


def test_bad_label_code():
    with pytest.raises(ValueError):
        PatchStore(np.zeros((1, 51, 51)), [[0, 0, 0]], [7])
