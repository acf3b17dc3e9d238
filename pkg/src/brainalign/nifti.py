"""Minimal NIfTI-1 read/write plus a raw-float32-with-JSON-sidecar alternative.

Covers the single-file (.nii / .nii.gz) layout with scalar 3D images, which is
all the pipeline stores. Data are kept in Fortran voxel order on disk as the
format requires and returned as (x, y, z)-indexed arrays.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.int32): 8,
          np.dtype(np.float32): 16, np.dtype(np.float64): 64}
_HEADER_SIZE = 348
_VOX_OFFSET = 352.0


class NiftiError(ValueError):
    pass


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError("only 3D volumes are supported")
    code = _CODES.get(data.dtype)
    if code is None:
        data = data.astype(np.float32)
        code = 16
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, _VOX_OFFSET)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[344:348] = b"n+1\x00"
    with _open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * int(_VOX_OFFSET - _HEADER_SIZE))
        f.write(np.asfortranarray(data).tobytes(order="F"))


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: not a NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: expected 3D volume, got dim[0]={dim[0]}")
    shape = tuple(dim[1:4])
    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope, inter = struct.unpack_from("<2f", raw, 112)
    dtype = np.dtype(_DTYPES[datatype])
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if (slope not in (0.0, 1.0)) or inter != 0.0:
        data = data * slope + inter
    else:
        data = np.ascontiguousarray(data)
    return data, tuple(float(p) for p in pixdim[1:4])


def write_raw(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """float32 voxel dump next to a JSON sidecar describing shape and spacing."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    path.write_bytes(data.tobytes(order="C"))
    sidecar = {"shape": list(data.shape), "spacing": list(spacing), "dtype": "float32"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_raw(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("dtype", "float32") != "float32":
        raise NiftiError(f"{path}: unsupported raw dtype {sidecar['dtype']}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(sidecar["shape"])
    return data.copy(), tuple(float(s) for s in sidecar["spacing"])


def load_volume_file(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_raw(path)
