"""Minimal single-file NIfTI-1 and raw+json label volume formats.

NIfTI-1 (``.nii``): a 348-byte header followed by 4 zero extension bytes and
the voxel data at ``vox_offset`` (352 on write).  Fields read: ``sizeof_hdr``
(also the endianness probe), ``dim``, ``datatype``, ``pixdim``, ``vox_offset``,
``magic`` and, when ``qform_code > 0``, ``qoffset_{x,y,z}`` as the origin.
Writing emits little-endian uint8 data with every other field zeroed, an
identity qform (``qform_code = 1``, zero quaternion) and the origin in
``qoffset``.

Raw fallback: ``<name>.json`` holding ``{"dims", "spacing_mm", "origin_mm",
"dtype": "uint8", "order": "x-fastest", "encoding", "data": "<name>.raw"}`` and
``<name>.raw`` with one byte per voxel, x varying fastest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from voiplace.errors import VolumeFormatError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# datatype code -> numpy dtype (byte order applied separately)
_DTYPES = {2: "u1", 4: "i2", 256: "i1", 512: "u2"}


def _is_raw_json(path: Path) -> bool:
    return path.suffix.lower() == ".json"


def read_raw_volume(path) -> Tuple[np.ndarray, tuple, tuple]:
    """Return ``(integer codes indexed [x,y,z], spacing_mm, origin_mm)``."""
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"volume file not found: {path}")
    if _is_raw_json(path):
        return read_raw_json(path)
    if path.suffix.lower() == ".gz":
        raise VolumeFormatError(f"compressed NIfTI is not supported: {path}")
    return read_nifti(path)


def write_volume(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    path = Path(path)
    if _is_raw_json(path) or path.suffix.lower() == ".raw":
        write_raw_json(path.with_suffix(".json"), data, spacing, origin)
    else:
        write_nifti(path, data, spacing, origin)


def read_nifti(path) -> Tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", blob[:4])[0] == HEADER_SIZE:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348, not a NIfTI-1 file")
    if blob[344:348] != MAGIC:
        raise VolumeFormatError(f"{path}: magic {blob[344:348]!r} is not single-file NIfTI-1 'n+1'")

    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = int(struct.unpack(endian + "f", blob[108:112])[0])
    qform_code = struct.unpack(endian + "h", blob[252:254])[0]
    qoffset = struct.unpack(endian + "3f", blob[268:280])

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:ndim + 1]):
        raise VolumeFormatError(f"{path}: expected a single 3-D volume, dim={dim[:ndim + 1]}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) <= 0:
        raise VolumeFormatError(f"{path}: non-positive dimensions {shape}")
    if datatype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype} "
                                f"(integer 8/16-bit only)")
    dtype = np.dtype(endian + _DTYPES[datatype])
    count = shape[0] * shape[1] * shape[2]
    end = vox_offset + count * dtype.itemsize
    if vox_offset < HEADER_SIZE or end > len(blob):
        raise VolumeFormatError(f"{path}: data segment truncated or vox_offset invalid")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.int64)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: pixdim spacing {spacing} not strictly positive")
    origin = tuple(float(q) for q in qoffset) if qform_code > 0 else (0.0, 0.0, 0.0)
    return data, spacing, origin


def write_nifti(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("only 3-D volumes can be written")
    if data.size and (data.min() < 0 or data.max() > 255):
        raise ValueError("label data must fit in uint8")
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 2)      # datatype uint8
    struct.pack_into("<h", header, 72, 8)      # bitpix
    struct.pack_into("<8f", header, 76, 1.0, *[float(s) for s in spacing], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<h", header, 252, 1)     # qform_code: scanner
    struct.pack_into("<3f", header, 268, *[float(o) for o in origin])
    header[344:348] = MAGIC
    body = np.asarray(data, dtype=np.uint8).tobytes(order="F")
    Path(path).write_bytes(bytes(header) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body)


def read_raw_json(path) -> Tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise VolumeFormatError(f"cannot parse raw-volume header {path}: {exc}") from exc
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        origin = tuple(float(o) for o in meta.get("origin_mm", (0.0, 0.0, 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: missing or invalid header field ({exc})") from exc
    if meta.get("dtype", "uint8") != "uint8":
        raise VolumeFormatError(f"{path}: unsupported raw dtype {meta.get('dtype')!r}")
    raw_path = path.with_name(meta.get("data", path.with_suffix(".raw").name))
    try:
        blob = raw_path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read raw voxel file {raw_path}: {exc}") from exc
    count = dims[0] * dims[1] * dims[2]
    if len(blob) != count:
        raise VolumeFormatError(f"{raw_path}: expected {count} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype=np.uint8).reshape(dims, order="F").astype(np.int64)
    return data, spacing, origin


def write_raw_json(path, data: np.ndarray, spacing, origin=(0.0, 0.0, 0.0),
                   encoding: str = "canonical") -> None:
    path = Path(path)
    data = np.asarray(data)
    raw_path = path.with_suffix(".raw")
    meta = {
        "dims": [int(d) for d in data.shape],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": "uint8",
        "order": "x-fastest",
        "encoding": encoding,
        "data": raw_path.name,
    }
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.asarray(data, dtype=np.uint8).tobytes(order="F"))


def save_label_volume(path, volume) -> None:
    write_volume(path, volume.labels, volume.spacing, volume.origin)
