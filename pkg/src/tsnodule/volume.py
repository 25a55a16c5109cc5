"""CT volumes, the NVOL container, HU windowing and patch cropping.

NVOL layout (little-endian)::

    b"NVOL" | u16 version=1 | u8 dtype=0 (f32) | u8 reserved=0
    | 3 x u32 dims (x, y, z) | 3 x f32 spacing (mm) | f32 voxels, x fastest
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionMismatchError, FormatError, TruncatedPayloadError, UnsupportedVersionError

MAGIC = b"NVOL"
VERSION = 1
_HEADER = struct.Struct("<4sHBB3I3f")

HU_MIN = -1200.0
HU_MAX = 600.0
PATCH = 32


@dataclass
class Volume:
    """``voxels`` is stored as a (z, y, x) C-order array, which is x-fastest on disk."""
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume voxels must be a non-empty 3D array, got {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(x, y, z) extents."""
        z, y, x = self.voxels.shape
        return x, y, z

    def at(self, x: int, y: int, z: int) -> float:
        return float(self.voxels[z, y, x])


def encode_volume(vol: Volume) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, 0, 0, *vol.dims, *vol.spacing_mm)
    return header + np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes()


def decode_volume(data: bytes) -> Volume:
    if len(data) < 4:
        raise TruncatedPayloadError("volume file shorter than its magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad volume magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("volume header truncated")
    _, version, dtype, _reserved, dx, dy, dz, sx, sy, sz = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported volume version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported volume dtype code {dtype}")
    if min(dx, dy, dz) < 1:
        raise DimensionMismatchError(f"volume dims must be positive, got {(dx, dy, dz)}")
    need = 4 * dx * dy * dz
    payload = data[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"volume payload has {len(payload)} bytes, dims {(dx, dy, dz)} need {need}")
    if len(payload) > need:
        raise DimensionMismatchError(f"volume payload has {len(payload) - need} bytes beyond dims {(dx, dy, dz)}")
    voxels = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dz, dy, dx)
    return Volume(voxels, (sx, sy, sz))


def write_volume(path, vol: Volume) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def clip_normalize(hu) -> np.ndarray:
    """Clamp to [-1200, 600] HU and map affinely onto [0, 1]."""
    hu = np.asarray(hu)
    if np.isnan(hu).any():
        raise ValueError("clip_normalize: NaN in input")
    dtype = hu.dtype if hu.dtype in (np.float32, np.float64) else np.float64
    out = (np.clip(hu.astype(np.float64), HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    return out.astype(dtype)


def extract_patch(vol: Volume, center_voxel, size: int = PATCH) -> np.ndarray:
    """Normalized ``[1, size, size, size]`` crop over ``[c - size/2, c + size/2)`` per axis.

    ``center_voxel`` is (x, y, z); the output axes are (z, y, x) like the
    volume. Voxels outside the volume read as -1200 HU.
    """
    c = tuple(int(v) for v in center_voxel)
    if len(c) != 3 or any(not 0 <= ci < n for ci, n in zip(c, vol.dims)):
        raise ValueError(f"center {tuple(center_voxel)} outside volume dims {vol.dims}")
    half = size // 2
    out = np.full((size, size, size), HU_MIN, dtype=np.float32)
    src, dst = [], []
    # volume axes are (z, y, x); reverse the (x, y, z) center to match
    for ci, n in zip(c[::-1], vol.voxels.shape):
        lo, hi = ci - half, ci - half + size
        s0, s1 = max(lo, 0), min(hi, n)
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = vol.voxels[tuple(src)]
    return clip_normalize(out)[None]
