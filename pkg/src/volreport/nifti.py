"""NIfTI-1 volume parsing, writing, resampling and intensity normalization.

Only single-file .nii / .nii.gz is handled (magic "n+1"); detached
header+image pairs ("ni1") are rejected. Byte order is detected from the
sizeof_hdr field. Array axes follow (D, H, W) with the file's x axis
fastest, i.e. voxels[z, y, x]; spacing_mm is ordered the same way.

Resampling uses the align-corners convention: output sample i maps to
source coordinate i * (S-1)/(T-1), so the first and last samples of each
axis coincide with the source corners. A single-sample target axis maps to
the source center.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, FormatError, UnsupportedDtypeError
from .tensor import Tensor

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODE_FOR_DTYPE = {v.name: k for k, v in DTYPE_CODES.items()}
BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    little_endian: bool


@dataclass
class Volume:
    """A parsed 3D scan in physical intensity units."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    source_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ContractError(f"volume must be 3-d, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ContractError(f"spacing must be strictly positive, got {self.spacing_mm}")
        if not np.isfinite(self.voxels).all():
            raise ContractError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class PreprocessConfig:
    """Fixed-shape normalization recipe feeding the vision encoder."""

    target_shape: tuple[int, int, int] = (8, 32, 32)
    window: tuple[float, float] = (-1000.0, 1000.0)
    resample_mode: str = "trilinear"

    def __post_init__(self):
        if self.window[0] >= self.window[1]:
            raise ConfigError(f"window low must be < high, got {self.window}")
        if self.resample_mode not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown resample mode {self.resample_mode!r}")
        if any(s < 1 for s in self.target_shape):
            raise ConfigError(f"target shape dims must be >= 1, got {self.target_shape}")

    def to_dict(self) -> dict:
        return {
            "target_shape": list(self.target_shape),
            "window": list(self.window),
            "resample_mode": self.resample_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(
            target_shape=tuple(d["target_shape"]),
            window=tuple(d["window"]),
            resample_mode=d["resample_mode"],
        )


def _maybe_gunzip(raw: bytes) -> bytes:
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_nifti(raw: bytes, source_id: str = "") -> tuple[NiftiHeader, Volume]:
    """Decode a NIfTI-1 byte stream (optionally gzipped) into a Volume."""
    raw = _maybe_gunzip(raw)
    if len(raw) < HEADER_SIZE + 4:
        raise FormatError(f"input too short for a NIfTI-1 file: {len(raw)} bytes")

    (le_size,) = struct.unpack_from("<i", raw, 0)
    if le_size == HEADER_SIZE:
        e = "<"
    else:
        (be_size,) = struct.unpack_from(">i", raw, 0)
        if be_size != HEADER_SIZE:
            raise FormatError(f"sizeof_hdr is {le_size} in either byte order, expected 348")
        e = ">"

    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise FormatError("detached header+image pairs (.hdr/.img) are not supported")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_SINGLE!r}")

    dim = struct.unpack_from(e + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(e + "2h", raw, 70)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", raw, 108)

    rank = dim[0]
    if not 1 <= rank <= 7:
        raise FormatError(f"dim[0] must be in 1..7, got {rank}")
    if datatype not in DTYPE_CODES:
        raise UnsupportedDtypeError(datatype)
    if bitpix != BITPIX[datatype]:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype code {datatype}")

    header = NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        magic=magic,
        little_endian=(e == "<"),
    )

    sizes = [max(1, dim[i]) for i in range(1, rank + 1)]
    if any(s > 1 for s in sizes[3:]):
        raise FormatError(f"dimensions beyond the third must be singleton: dim={dim}")
    count = int(np.prod(sizes))
    base = DTYPE_CODES[datatype].newbyteorder(e)
    offset = int(round(vox_offset))
    if offset < HEADER_SIZE + 4:
        raise FormatError(f"vox_offset {vox_offset} overlaps the header")
    nbytes = count * base.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(
            f"data section truncated: need {nbytes} bytes at offset {offset}, have {len(raw) - offset}"
        )

    flat = np.frombuffer(raw, dtype=base, count=count, offset=offset)
    # x is fastest in the file; fill up to 3 axes and map (nx, ny, nz) -> voxels[z, y, x]
    nx = sizes[0]
    ny = sizes[1] if len(sizes) > 1 else 1
    nz = sizes[2] if len(sizes) > 2 else 1
    vox = flat.reshape(nz, ny, nx)

    out_dtype = np.float64 if datatype == 64 else np.float32
    vox = vox.astype(out_dtype)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        vox = vox * out_dtype(scl_slope) + out_dtype(scl_inter)

    sp = [float(pixdim[i]) if pixdim[i] > 0 else 1.0 for i in (3, 2, 1)]
    volume = Volume(voxels=np.ascontiguousarray(vox), spacing_mm=tuple(sp), source_id=source_id)
    return header, volume


def write_nifti(volume: Volume, dtype: str = "float32", little_endian: bool = True) -> bytes:
    """Serialize a Volume as a minimal single-file NIfTI-1 byte stream.

    Defaults to float32 data with slope 1 / intercept 0; other supported
    dtypes and big-endian output exist for round-trip testing against
    foreign files. Voxels are cast, so values must be representable.
    """
    dt = np.dtype(dtype)
    if dt.name not in CODE_FOR_DTYPE:
        raise FormatError(f"cannot write NIfTI dtype {dtype!r}")
    code = CODE_FOR_DTYPE[dt.name]
    e = "<" if little_endian else ">"
    nz, ny, nx = volume.voxels.shape

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(e + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(e + "8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(e + "2h", hdr, 70, code, BITPIX[code])
    sd, sh, sw = volume.spacing_mm
    struct.pack_into(e + "8f", hdr, 76, 1.0, sw, sh, sd, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(e + "3f", hdr, 108, float(HEADER_SIZE + 4), 1.0, 0.0)
    hdr[123] = 2  # spatial units: millimetres
    hdr[344:348] = MAGIC_SINGLE

    data = np.ascontiguousarray(volume.voxels).astype(dt.newbyteorder(e)).tobytes()
    return bytes(hdr) + b"\x00" * 4 + data


def load_nifti(path) -> Volume:
    from pathlib import Path

    p = Path(path)
    raw = p.read_bytes()
    name = p.name
    for suffix in (".gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    _, vol = parse_nifti(raw, source_id=name)
    return vol


def save_nifti(volume: Volume, path, dtype: str = "float32") -> None:
    from pathlib import Path

    p = Path(path)
    raw = write_nifti(volume, dtype=dtype)
    if p.name.endswith(".gz"):
        # fixed mtime so identical volumes produce identical files
        raw = gzip.compress(raw, mtime=0)
    p.write_bytes(raw)


def _axis_map(src: int, dst: int) -> tuple[float, float]:
    """(scale, offset) for align-corners coordinates along one axis."""
    if dst > 1:
        return (src - 1) / (dst - 1), 0.0
    return 0.0, (src - 1) / 2.0


def resample_volume(volume: Volume, target_shape, mode: str = "trilinear") -> Volume:
    """Resample to target_shape on the align-corners grid."""
    target_shape = tuple(int(s) for s in target_shape)
    if any(s < 1 for s in target_shape):
        raise ConfigError(f"target dims must be >= 1, got {target_shape}")
    src = volume.voxels
    if target_shape == src.shape and mode == "nearest":
        out = src.copy()
    else:
        maps = [_axis_map(s, t) for s, t in zip(src.shape, target_shape)]
        scales = tuple(m[0] for m in maps)
        offsets = tuple(m[1] for m in maps)
        if mode == "trilinear":
            out = kernels.resample_trilinear(np.ascontiguousarray(src), target_shape, scales, offsets)
        elif mode == "nearest":
            idx = [
                np.clip(np.floor(np.arange(t) * sc + off + 0.5).astype(np.int64), 0, s - 1)
                for t, sc, off, s in zip(target_shape, scales, offsets, src.shape)
            ]
            out = src[np.ix_(idx[0], idx[1], idx[2])]
        else:
            raise ConfigError(f"unknown resample mode {mode!r}")
    spacing = tuple(
        sp * (s - 1) / (t - 1) if t > 1 and s > 1 else sp * s / t
        for sp, s, t in zip(volume.spacing_mm, src.shape, target_shape)
    )
    return Volume(voxels=np.ascontiguousarray(out), spacing_mm=spacing, source_id=volume.source_id)


def normalize_intensity(volume: Volume, window: tuple[float, float], dtype="float32") -> Tensor:
    """Clamp to [low, high] then map affinely onto [-1, +1]."""
    low, high = window
    if low >= high:
        raise ConfigError(f"window low must be < high, got {window}")
    v = np.clip(volume.voxels, low, high)
    out = (v - low) * (2.0 / (high - low)) - 1.0
    return Tensor(out, dtype=dtype)


def preprocess(volume: Volume, cfg: PreprocessConfig, dtype="float32") -> Tensor:
    """Resample to the model input shape and normalize intensities."""
    vol = resample_volume(volume, cfg.target_shape, cfg.resample_mode)
    return normalize_intensity(vol, cfg.window, dtype=dtype)
