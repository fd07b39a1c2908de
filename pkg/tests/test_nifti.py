import gzip
import struct

import numpy as np
import pytest

from volreport import nifti
from volreport.errors import ConfigError, ContractError, FormatError, UnsupportedDtypeError

rng = np.random.default_rng(11)


def random_volume(dtype: str) -> nifti.Volume:
    shape = tuple(rng.integers(2, 8, size=3))
    if dtype in ("uint8", "int16", "int32"):
        vox = rng.integers(0, 200, size=shape).astype(np.float32)
    elif dtype == "float32":
        vox = rng.normal(scale=100, size=shape).astype(np.float32)
    else:
        vox = rng.normal(scale=100, size=shape).astype(np.float64)
    spacing = tuple(float(np.float32(x)) for x in rng.uniform(0.4, 4.0, size=3))
    return nifti.Volume(vox, spacing, "rand")


@pytest.mark.parametrize("dtype", ["uint8", "int16", "int32", "float32", "float64"])
@pytest.mark.parametrize("little_endian", [True, False])
def test_parse_write_identity(dtype, little_endian):
    for _ in range(4):
        vol = random_volume(dtype)
        raw = nifti.write_nifti(vol, dtype=dtype, little_endian=little_endian)
        header, back = nifti.parse_nifti(raw)
        assert np.array_equal(back.voxels, vol.voxels)
        assert back.spacing_mm == vol.spacing_mm
        assert header.little_endian == little_endian
        assert header.magic == b"n+1\x00"


def test_big_endian_reference_file_from_independent_writer():
    """Header packed field-by-field with struct, independent of write_nifti."""
    vox = np.arange(24, dtype=">f4").reshape(2, 3, 4)
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 4, 3, 2, 1, 1, 1, 1)  # nx=4 ny=3 nz=2
    struct.pack_into(">2h", hdr, 70, 16, 32)  # float32
    struct.pack_into(">8f", hdr, 76, 1.0, 0.5, 1.5, 2.5, 1, 1, 1, 1)
    struct.pack_into(">3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    raw = bytes(hdr) + b"\x00" * 4 + vox.tobytes()

    header, vol = nifti.parse_nifti(raw)
    assert not header.little_endian
    assert vol.shape == (2, 3, 4)
    assert np.array_equal(vol.voxels, np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    assert vol.spacing_mm == (2.5, 1.5, 0.5)


def test_gzip_transparent():
    vol = random_volume("float32")
    raw = nifti.write_nifti(vol)
    _, back = nifti.parse_nifti(gzip.compress(raw))
    assert np.array_equal(back.voxels, vol.voxels)


def test_bad_magic_rejected():
    raw = bytearray(nifti.write_nifti(random_volume("float32")))
    raw[344:348] = b"xxxx"
    with pytest.raises(FormatError, match="magic"):
        nifti.parse_nifti(bytes(raw))


def test_pair_magic_rejected():
    raw = bytearray(nifti.write_nifti(random_volume("float32")))
    raw[344:348] = b"ni1\x00"
    with pytest.raises(FormatError, match="pair"):
        nifti.parse_nifti(bytes(raw))


def test_unsupported_datatype_code():
    raw = bytearray(nifti.write_nifti(random_volume("float32")))
    struct.pack_into("<2h", raw, 70, 128, 24)  # RGB triple, unsupported
    with pytest.raises(UnsupportedDtypeError, match="128"):
        nifti.parse_nifti(bytes(raw))


def test_truncated_data_rejected():
    raw = nifti.write_nifti(random_volume("float32"))
    with pytest.raises(FormatError, match="truncated"):
        nifti.parse_nifti(raw[:-5])


def test_short_input_rejected():
    with pytest.raises(FormatError, match="too short"):
        nifti.parse_nifti(b"\x00" * 100)


def test_slope_intercept_applied():
    vol = nifti.Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1))
    raw = bytearray(nifti.write_nifti(vol, dtype="int16"))
    struct.pack_into("<3f", raw, 108, 352.0, 2.0, -5.0)
    _, back = nifti.parse_nifti(bytes(raw))
    assert np.array_equal(back.voxels, np.arange(8).reshape(2, 2, 2) * 2.0 - 5.0)


def test_zero_slope_means_unscaled():
    vol = nifti.Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), (1, 1, 1))
    raw = bytearray(nifti.write_nifti(vol, dtype="int16"))
    struct.pack_into("<3f", raw, 108, 352.0, 0.0, 99.0)
    _, back = nifti.parse_nifti(bytes(raw))
    assert np.array_equal(back.voxels, np.arange(8).reshape(2, 2, 2))


def test_save_load_gz_deterministic(tmp_path):
    vol = random_volume("float32")
    p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    nifti.save_nifti(vol, p1)
    nifti.save_nifti(vol, p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = nifti.load_nifti(p1)
    assert np.array_equal(back.voxels, vol.voxels)
    assert back.source_id == "a"


class TestResample:
    def test_identity_nearest(self):
        vol = random_volume("float32")
        out = nifti.resample_volume(vol, vol.shape, "nearest")
        assert np.array_equal(out.voxels, vol.voxels)

    def test_constant_any_shape(self):
        vol = nifti.Volume(np.full((3, 4, 5), 2.5, np.float32), (1, 1, 1))
        out = nifti.resample_volume(vol, (7, 2, 9), "trilinear")
        assert np.allclose(out.voxels, 2.5)

    def test_ramp_downsample_align_corners(self):
        vol = nifti.Volume(np.arange(4, dtype=np.float64).reshape(1, 1, 4), (1, 1, 1))
        out = nifti.resample_volume(vol, (1, 1, 2), "trilinear")
        assert np.array_equal(out.voxels.ravel(), [0.0, 3.0])

    def test_trilinear_preserves_bounds(self):
        for _ in range(5):
            vol = random_volume("float32")
            t = tuple(rng.integers(1, 12, size=3))
            out = nifti.resample_volume(vol, t, "trilinear")
            assert out.voxels.min() >= vol.voxels.min() - 1e-4
            assert out.voxels.max() <= vol.voxels.max() + 1e-4

    def test_spacing_rescaled(self):
        vol = nifti.Volume(np.zeros((5, 5, 5), np.float32), (2.0, 2.0, 2.0))
        out = nifti.resample_volume(vol, (9, 9, 9), "trilinear")
        assert np.allclose(out.spacing_mm, 2.0 * 4 / 8)

    def test_bad_target_rejected(self):
        with pytest.raises(ConfigError):
            nifti.resample_volume(random_volume("float32"), (0, 4, 4))


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        vol = nifti.Volume(np.array([[[-1000.0, 0.0, 1000.0]]]), (1, 1, 1))
        out = nifti.normalize_intensity(vol, (-1000, 1000), dtype="float64")
        assert np.allclose(out.data.ravel(), [-1.0, 0.0, 1.0])

    def test_clamping(self):
        vol = nifti.Volume(np.array([[[-5000.0, 5000.0]]]), (1, 1, 1))
        out = nifti.normalize_intensity(vol, (-1000, 1000), dtype="float64")
        assert np.allclose(out.data.ravel(), [-1.0, 1.0])

    def test_output_bounded(self):
        vol = random_volume("float32")
        out = nifti.normalize_intensity(vol, (-150, 150))
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_bad_window(self):
        with pytest.raises(ConfigError):
            nifti.normalize_intensity(random_volume("float32"), (10, 10))


def test_volume_invariants():
    with pytest.raises(ContractError):
        nifti.Volume(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(ContractError):
        nifti.Volume(np.zeros((2, 2, 2)), (0.0, 1, 1))
    with pytest.raises(ContractError):
        nifti.Volume(np.full((2, 2, 2), np.nan), (1, 1, 1))
