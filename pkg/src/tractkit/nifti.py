"""Minimal NIfTI-1 reader/writer.

Format reference (the supported subset)
---------------------------------------
* Single-file uncompressed ``.nii``, little-endian, magic ``n+1\\0``.
* 348-byte header, voxel data at ``vox_offset`` (written at 352).
* dtypes: float32 (code 16), uint8 (2), int16 (4).
* 3D or 4D (``dim[0]`` in {3, 4}); the 4th axis holds channels.
* Voxel order in the file is x-fastest; in memory arrays are indexed
  ``[x, y, z(, c)]``.
* Affine: sform when ``sform_code > 0``, else qform (quaternion), else
  identity orientation scaled by ``pixdim``.
* ``scl_slope``/``scl_inter`` are applied on load when the slope is
  nonzero and not the identity pair (1, 0); scaled data is float32.
* Round trip is bit-lossless for float32 data.

Anything outside this subset raises a distinct error below.
"""

from __future__ import annotations

import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .volume import Volume

MAGIC = b"n+1\x00"
HEADER_SIZE = 348
VOX_OFFSET = 352

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_FOR_DTYPE = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
                   np.dtype(np.float32): 16}


class NiftiError(Exception):
    """Base class for file-format errors."""


class BadMagic(NiftiError):
    """File does not carry the single-file NIfTI-1 magic."""


class UnsupportedDtype(NiftiError):
    """Voxel dtype outside the supported subset."""


class TruncatedFile(NiftiError):
    """Data section shorter than the header promises."""


class IoFailure(NiftiError):
    """Underlying I/O failed (missing file, unwritable path)."""


@contextmanager
def atomic_write(path) -> "Path":
    """Write to a temp file in the target directory, then rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _quaternion_affine(hdr: dict) -> np.ndarray:
    """qform quaternion + qfac -> 4x4 affine (NIfTI-1 method 2)."""
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = max(0.0, 1.0 - (b * b + c * c + d * d)) ** 0.5
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return affine


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header is {len(raw)} bytes, need {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise BadMagic(f"magic {raw[344:348]!r} is not {MAGIC!r}")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise BadMagic(f"sizeof_hdr {sizeof_hdr} (big-endian or corrupt header)")
    hdr = {}
    hdr["dim"] = struct.unpack_from("<8h", raw, 40)
    hdr["datatype"], hdr["bitpix"] = struct.unpack_from("<2h", raw, 70)
    hdr["pixdim"] = struct.unpack_from("<8f", raw, 76)
    hdr["vox_offset"], hdr["scl_slope"], hdr["scl_inter"] = struct.unpack_from(
        "<3f", raw, 108)
    hdr["descrip"] = raw[148:228].split(b"\x00", 1)[0].decode("ascii", "replace")
    hdr["qform_code"], hdr["sform_code"] = struct.unpack_from("<2h", raw, 252)
    (hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"],
     hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]) = struct.unpack_from(
        "<6f", raw, 256)
    hdr["srow"] = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)
    return hdr


def load_nifti(path) -> Volume:
    """Read a volume from the supported NIfTI-1 subset.

    Raises:
        IoFailure: file missing/unreadable.
        BadMagic, UnsupportedDtype, TruncatedFile: format violations.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    hdr = _parse_header(raw)

    ndim = hdr["dim"][0]
    if ndim not in (3, 4):
        raise UnsupportedDtype(f"only 3D/4D volumes supported, got dim[0]={ndim}")
    dims = tuple(int(d) for d in hdr["dim"][1:1 + ndim])
    if any(d <= 0 for d in dims):
        raise TruncatedFile(f"non-positive extent in dim: {dims}")
    if hdr["datatype"] not in _DTYPE_CODES:
        raise UnsupportedDtype(f"datatype code {hdr['datatype']} not supported")
    dtype = np.dtype(_DTYPE_CODES[hdr["datatype"]])

    offset = int(hdr["vox_offset"])
    n_bytes = int(np.prod(dims)) * dtype.itemsize
    body = raw[offset:offset + n_bytes]
    if len(body) < n_bytes:
        raise TruncatedFile(f"data section has {len(body)} bytes, need {n_bytes}")
    data = np.frombuffer(body, dtype=dtype).reshape(dims, order="F")

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = (data.astype(np.float32) * np.float32(slope)) + np.float32(inter)

    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3], 1.0])

    voxel_size = tuple(abs(float(p)) or 1.0 for p in hdr["pixdim"][1:4])
    return Volume(data, voxel_size=voxel_size, affine=affine)


def save_nifti(v: Volume, path, descrip: str = "") -> None:
    """Write a volume as uncompressed single-file NIfTI-1.

    Raises:
        UnsupportedDtype: dtype outside {float32, uint8, int16}.
        IoFailure: unwritable path.
    """
    dtype = np.dtype(v.data.dtype)
    if dtype not in _CODE_FOR_DTYPE:
        raise UnsupportedDtype(f"cannot save dtype {dtype}")

    ndim = v.data.ndim
    dim = [ndim, *v.dims] + [1] * (7 - ndim)
    pixdim = [1.0, *v.voxel_size, 1.0, 1.0, 1.0, 1.0]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, _CODE_FOR_DTYPE[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # spatial units: mm
    struct.pack_into("<80s", hdr, 148, descrip.encode("ascii", "replace")[:79])
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<12f", hdr, 280, *np.asarray(v.affine[:3], np.float32).ravel())
    hdr[344:348] = MAGIC

    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(bytes(hdr))
            f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            f.write(np.asfortranarray(v.data).tobytes(order="F"))
