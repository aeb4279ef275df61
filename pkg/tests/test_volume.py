import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cacscore.volume import (
    DimensionMismatchError,
    HeaderError,
    RoiMask,
    SizeMismatchError,
    UnsupportedVersionError,
    Volume,
    apply_mask,
    load_mask,
    load_volume,
    resample_inplane,
    resample_mask_inplane,
    save_mask,
    save_volume,
)


def test_dims_and_indexing_are_xyz():
    data = np.arange(4 * 3 * 2, dtype=np.int16).reshape(2, 3, 4)  # (nz, ny, nx)
    vol = Volume(data, (0.5, 0.5, 3.0))
    assert vol.dims == (4, 3, 2)
    assert vol[(3, 2, 1)] == data[1, 2, 3]


def test_values_are_clamped_to_hu_range():
    vol = Volume(np.array([[[5000, -3000, 100]]]), (1, 1, 1))
    assert vol.data.tolist() == [[[4095, -1024, 100]]]


def test_volume_is_read_only():
    vol = Volume(np.zeros((1, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 5


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1, float("nan"))])
def test_bad_spacing_rejected(spacing):
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1)), spacing)


def test_round_trip_4x4x2(tmp_path):
    data = np.arange(32, dtype=np.int16).reshape(2, 4, 4) * 7 - 50
    vol = Volume(data, (0.5, 0.5, 3.0))
    save_volume(vol, tmp_path / "v.ctv")
    back = load_volume(tmp_path / "v.ctv")
    assert back.dims == (4, 4, 2)
    assert back.spacing == (0.5, 0.5, 3.0)
    assert back == vol


def test_single_voxel_round_trip(tmp_path):
    vol = Volume(np.full((1, 1, 1), 130), (0.5, 0.5, 3.0))
    save_volume(vol, tmp_path / "one.ctv")
    assert load_volume(tmp_path / "one.ctv")[(0, 0, 0)] == 130


def test_clamp_applies_to_file_payload(tmp_path):
    vol = Volume(np.zeros((1, 1, 2)), (1, 1, 1))
    save_volume(vol, tmp_path / "v.ctv")
    raw = bytearray((tmp_path / "v.ctv").read_bytes())
    raw[-2:] = np.int16(5000).astype("<i2").tobytes()
    (tmp_path / "v.ctv").write_bytes(bytes(raw))
    assert load_volume(tmp_path / "v.ctv")[(1, 0, 0)] == 4095


def test_short_payload_is_size_mismatch(tmp_path):
    save_volume(Volume(np.zeros((2, 4, 4)), (1, 1, 1)), tmp_path / "v.ctv")
    raw = (tmp_path / "v.ctv").read_bytes()
    (tmp_path / "v.ctv").write_bytes(raw[:-2])
    with pytest.raises(SizeMismatchError):
        load_volume(tmp_path / "v.ctv")


def test_bad_magic_and_version(tmp_path):
    save_volume(Volume(np.zeros((1, 2, 2)), (1, 1, 1)), tmp_path / "v.ctv")
    raw = bytearray((tmp_path / "v.ctv").read_bytes())
    (tmp_path / "bad.ctv").write_bytes(b"XXXXXXX" + bytes(raw[7:]))
    with pytest.raises(HeaderError):
        load_volume(tmp_path / "bad.ctv")
    raw[7] = 9
    (tmp_path / "v9.ctv").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        load_volume(tmp_path / "v9.ctv")


def test_mask_file_is_not_a_volume(tmp_path):
    save_mask(RoiMask(np.ones((1, 2, 2)), (1, 1, 1)), tmp_path / "m.ctmsk")
    with pytest.raises(HeaderError):
        load_volume(tmp_path / "m.ctmsk")


def test_mask_round_trip(tmp_path):
    bits = np.random.default_rng(0).random((3, 5, 4)) > 0.5
    mask = RoiMask(bits, (0.5, 0.5, 3.0))
    save_mask(mask, tmp_path / "m.ctmsk")
    assert load_mask(tmp_path / "m.ctmsk") == mask


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores file permissions")
def test_save_to_read_only_dir(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_volume(Volume(np.zeros((1, 1, 1)), (1, 1, 1)), ro / "v.ctv")
    finally:
        ro.chmod(0o700)


def test_save_into_missing_dir_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((1, 1, 1)), (1, 1, 1)), tmp_path / "nope" / "v.ctv")


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.int16, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6)))
def test_round_trip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "v.ctv"
    vol = Volume(data, (0.7, 0.6, 2.5))
    save_volume(vol, path)
    assert load_volume(path) == vol


# -- resampling -------------------------------------------------------------------


def test_resample_identity_at_target():
    vol = Volume(np.arange(12).reshape(1, 3, 4), (0.5, 0.5, 3.0))
    assert resample_inplane(vol) is vol


def test_resample_2x2_to_4x4_blocks():
    vol = Volume(np.array([[[100, 200], [300, 400]]]), (1.0, 1.0, 3.0))
    out = resample_inplane(vol, 0.5)
    assert out.dims == (4, 4, 1)
    assert out.spacing == (0.5, 0.5, 3.0)
    expected = np.array([[100, 100, 200, 200], [100, 100, 200, 200], [300, 300, 400, 400], [300, 300, 400, 400]])
    np.testing.assert_array_equal(out.data[0], expected)


def test_resample_downsample_picks_nearest():
    # 0.25 mm -> 0.5 mm: output center 0.25 mm sits between inputs 0 and 1; tie goes low
    vol = Volume(np.arange(8).reshape(1, 1, 8), (0.25, 0.5, 3.0))
    out = resample_inplane(vol, 0.5)
    assert out.data[0, 0].tolist() == [0, 2, 4, 6]


def test_resample_keeps_slices():
    vol = Volume(np.arange(2 * 3 * 3).reshape(2, 3, 3), (0.7, 0.7, 2.5))
    out = resample_inplane(vol, 0.5)
    assert out.dims[2] == 2 and out.spacing[2] == 2.5
    assert out.dims[:2] == (round(3 * 0.7 / 0.5),) * 2


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.int16, st.tuples(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9))),
    st.sampled_from([0.33, 0.4, 0.51, 0.6, 1.0]),
)
def test_resampled_values_come_from_input(data, spacing):
    vol = Volume(data, (spacing, spacing, 3.0))
    out = resample_inplane(vol, 0.5)
    assert set(np.unique(out.data)) <= set(np.unique(vol.data))


def test_mask_resampling_matches_volume_grid():
    bits = np.random.default_rng(1).random((2, 7, 5)) > 0.5
    spacing = (0.7, 0.35, 3.0)
    out = resample_mask_inplane(RoiMask(bits, spacing))
    vol = resample_inplane(Volume(bits.astype(np.int16), spacing))
    np.testing.assert_array_equal(out.bits, vol.data.astype(bool))


# -- masking ----------------------------------------------------------------------


def test_apply_mask_all_true_is_identity():
    vol = Volume(np.arange(8).reshape(2, 2, 2), (1, 1, 1))
    assert apply_mask(vol, RoiMask(np.ones((2, 2, 2)), (1, 1, 1))) == vol


def test_apply_mask_all_false_is_air():
    vol = Volume(np.arange(8).reshape(2, 2, 2), (1, 1, 1))
    out = apply_mask(vol, RoiMask(np.zeros((2, 2, 2)), (1, 1, 1)))
    assert (out.data == -1024).all()


def test_apply_mask_single_voxel():
    vol = Volume(np.full((1, 3, 3), 300), (1, 1, 1))
    bits = np.zeros((1, 3, 3), dtype=bool)
    bits[0, 1, 2] = True
    out = apply_mask(vol, RoiMask(bits, (1, 1, 1)))
    assert np.argwhere(out.data == 300).tolist() == [[0, 1, 2]]


def test_apply_mask_grid_mismatch():
    with pytest.raises(DimensionMismatchError):
        apply_mask(Volume(np.zeros((1, 2, 2)), (1, 1, 1)), RoiMask(np.ones((1, 2, 3))))
