import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmri_microfit.volume_io import (BadMagicError, DimensionOverflowError, GradientTable,
                                     GradientTableError, HeaderSizeError, ParamMaps, TruncatedDataError,
                                     UnsupportedDatatypeError, UnsupportedVariantError, Volume4D,
                                     read_gradient_table, read_nifti, write_gradient_table, write_nifti)

DATA = Path(__file__).parent / "data"


def test_zero_volume_file_size(tmp_path):
    p = tmp_path / "z.nii"
    write_nifti(Volume4D(np.zeros((2, 2, 2, 1))), p)
    assert p.stat().st_size == 352 + 8 * 4


def test_roundtrip_bitwise(tmp_path, rng):
    data = rng.normal(size=(3, 4, 5, 6)).astype(np.float32).astype(np.float64)
    v = Volume4D(data, (1.25, 1.5, 2.0), "signal")
    write_nifti(v, tmp_path / "v.nii")
    w = read_nifti(tmp_path / "v.nii")
    assert w.dims == (3, 4, 5, 6)
    assert np.array_equal(w.data, v.data)
    assert w.spacing == (1.25, 1.5, 2.0)
    assert w.intent == "signal"


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(*[st.integers(1, 4)] * 4),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.sampled_from(["signal", "parameter", "label"]))
def test_roundtrip_property(tmp_path_factory, data, intent):
    p = tmp_path_factory.mktemp("rt") / "v.nii"
    write_nifti(Volume4D(data, intent=intent), p)
    w = read_nifti(p)
    assert np.array_equal(w.data, data.astype(np.float64))
    assert w.intent == intent


def test_three_d_is_promoted(tmp_path):
    v = Volume4D(np.ones((2, 3, 4)))
    assert v.dims == (2, 3, 4, 1)


def test_probability_range_enforced():
    with pytest.raises(ValueError):
        Volume4D(np.full((2, 2, 2), 1.5), intent="probability")


def test_dimension_overflow(tmp_path):
    v = Volume4D(np.zeros((70000, 1, 1, 1)))
    with pytest.raises(DimensionOverflowError):
        write_nifti(v, tmp_path / "big.nii")


def _patched(tmp_path, offset, payload):
    p = tmp_path / "src.nii"
    write_nifti(Volume4D(np.ones((2, 2, 2, 1))), p)
    raw = bytearray(p.read_bytes())
    raw[offset:offset + len(payload)] = payload
    out = tmp_path / "bad.nii"
    out.write_bytes(bytes(raw))
    return out


def test_detached_variant_rejected(tmp_path):
    with pytest.raises(UnsupportedVariantError) as exc:
        read_nifti(_patched(tmp_path, 344, b"ni1\0"))
    assert exc.value.field == "magic"


def test_bad_magic(tmp_path):
    with pytest.raises(BadMagicError):
        read_nifti(_patched(tmp_path, 344, b"xyz\0"))


def test_bad_header_size(tmp_path):
    with pytest.raises(HeaderSizeError):
        read_nifti(_patched(tmp_path, 0, struct.pack("<i", 540)))


def test_unsupported_datatype(tmp_path):
    with pytest.raises(UnsupportedDatatypeError) as exc:
        read_nifti(_patched(tmp_path, 70, struct.pack("<h", 128)))
    assert exc.value.field == "datatype"


def test_truncated(tmp_path):
    p = tmp_path / "t.nii"
    write_nifti(Volume4D(np.ones((4, 4, 4, 2))), p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(TruncatedDataError):
        read_nifti(p)


def test_big_endian_header(tmp_path):
    # hand-built big-endian int16 file: 2x1x1 values (3, -2)
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 1, 1, 1, 1, 1, 1)
    struct.pack_into(">hh", hdr, 70, 4, 16)
    struct.pack_into(">8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into(">f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\0"
    p = tmp_path / "be.nii"
    p.write_bytes(bytes(hdr) + b"\0" * 4 + struct.pack(">2h", 3, -2))
    v = read_nifti(p)
    assert v.dims == (2, 1, 1, 1)
    assert v.data[:, 0, 0, 0].tolist() == [3.0, -2.0]


def test_reference_fixture_float32():
    v = read_nifti(DATA / "ref_f32_2x2x2x3.nii")
    assert v.dims == (2, 2, 2, 3)
    expected = np.arange(24, dtype=np.float32).reshape(2, 2, 2, 3) * 0.5 - 1.0
    assert np.array_equal(v.data, expected)
    assert v.spacing == (1.5, 2.0, 2.5)
    assert v.orientation.qform_code == 1 and v.orientation.sform_code == 1
    assert v.orientation.srow[3] == -10.0


def test_reference_fixture_scaled_int16():
    v = read_nifti(DATA / "ref_i16_scaled_2x3x4.nii")
    assert v.dims == (2, 3, 4, 1)
    raw = np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 5
    assert np.array_equal(v.data[..., 0], raw * 0.5 + 2.0)


def test_agrees_with_nibabel(tmp_path, rng):
    nib = pytest.importorskip("nibabel")
    data = rng.normal(size=(2, 2, 2, 3)).astype(np.float32)
    img = nib.Nifti1Image(data, np.diag([2.0, 2.0, 2.0, 1.0]))
    nib.save(img, tmp_path / "n.nii")
    v = read_nifti(tmp_path / "n.nii")
    assert v.dims == (2, 2, 2, 3)
    assert np.array_equal(v.data, data.astype(np.float64))
    # and our writer is readable by nibabel
    write_nifti(v, tmp_path / "o.nii")
    back = nib.load(tmp_path / "o.nii")
    assert back.shape == (2, 2, 2, 3)
    assert np.array_equal(np.asarray(back.dataobj), data)


def test_gradient_table_minimal(tmp_path):
    (tmp_path / "b.bval").write_text("0 1000 1000\n")
    (tmp_path / "b.bvec").write_text("0 1 0\n0 0 1\n0 0 0\n")
    t = read_gradient_table(tmp_path / "b.bval", tmp_path / "b.bvec")
    assert t.b0_indices.tolist() == [0]
    assert len(t.shells) == 1
    assert t.shells[0].bvalue == 1000
    assert list(t.shells[0].indices) == [1, 2]


def test_gradient_table_hcp_shells(hcp_table):
    assert len(hcp_table) == 288
    assert len(hcp_table.b0_indices) == 18
    assert [s.bvalue for s in hcp_table.shells] == [1000, 2000, 3000]
    assert all(len(s.indices) == 90 for s in hcp_table.shells)


def test_gradient_table_length_mismatch(tmp_path):
    (tmp_path / "b.bval").write_text("0 1000 1000\n")
    (tmp_path / "b.bvec").write_text("0 1 0 1\n0 0 1 0\n0 0 0 0\n")
    with pytest.raises(GradientTableError):
        read_gradient_table(tmp_path / "b.bval", tmp_path / "b.bvec")


def test_gradient_table_zero_direction():
    with pytest.raises(GradientTableError):
        GradientTable(np.array([0.0, 1000.0]), np.zeros((2, 3)))


def test_gradient_table_roundtrip(tmp_path, hcp_table):
    write_gradient_table(hcp_table, tmp_path / "x.bval", tmp_path / "x.bvec")
    t = read_gradient_table(tmp_path / "x.bval", tmp_path / "x.bvec")
    assert np.array_equal(t.bvals, hcp_table.bvals)
    assert np.allclose(t.bvecs, hcp_table.bvecs, atol=1e-12)


def test_shell_tolerance_groups_nearby_bvalues():
    bvals = np.array([5.0, 990.0, 1010.0, 2000.0, 2030.0])
    bvecs = np.tile([1.0, 0.0, 0.0], (5, 1))
    t = GradientTable(bvals, bvecs)
    assert t.b0_indices.tolist() == [0]
    assert [list(s.indices) for s in t.shells] == [[1, 2], [3, 4]]


def test_param_maps_save_load(tmp_path, rng):
    maps = ParamMaps({"FA": rng.random((3, 3, 3)), "MD": rng.random((3, 3, 3)) * 1e-3}, (2.0, 2.0, 2.0))
    maps.save(tmp_path)
    back = ParamMaps.load(tmp_path, ["FA", "MD"])
    assert back.spacing == (2.0, 2.0, 2.0)
    assert np.allclose(back["FA"], maps["FA"], rtol=1e-7)
    assert np.allclose(back["MD"], maps["MD"], rtol=1e-7)
