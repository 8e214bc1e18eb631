"""Minimal NIfTI-1 reader/writer for single 3D volumes.

Covers the header subset BraTS files use: dims, pixdim, datatype,
scl_slope/scl_inter and vox_offset.  Orientation (qform/sform) is ignored.
Arrays are returned slice-major, ``[dim3, dim2, dim1]`` = ``[z, y, x]``.
"""

import gzip
import os
import struct

import numpy as np

from ..errors import FormatError

HEADER_SIZE = 348

DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
CODES = {np.dtype(v): k for k, v in DTYPES.items()}


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_header(raw):
    if len(raw) < HEADER_SIZE:
        raise FormatError("file shorter than a NIfTI-1 header")
    for endian in "<>":
        (size,) = struct.unpack_from(endian + "i", raw, 0)
        if size == HEADER_SIZE:
            break
    else:
        raise FormatError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "hh", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    slope, inter = struct.unpack_from(endian + "ff", raw, 112)
    return {
        "endian": endian,
        "magic": magic,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": slope,
        "scl_inter": inter,
    }


def read_nifti(path):
    """Read a 3D NIfTI-1 file; returns ``(float32 array [z, y, x], spacing (z, y, x))``.

    Header scaling is applied (``value * scl_slope + scl_inter``; slope 0
    means unscaled).
    """
    with _open(path) as fh:
        raw = fh.read()
    hdr = read_header(raw)
    ndim = hdr["dim"][0]
    if ndim != 3 and not (ndim == 4 and hdr["dim"][4] == 1):
        raise FormatError(f"expected a single 3D image, header declares {ndim} dimensions")
    nx, ny, nz = hdr["dim"][1:4]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dimensions {(nx, ny, nz)}")
    if hdr["datatype"] not in DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {hdr['datatype']}")
    dtype = np.dtype(DTYPES[hdr["datatype"]]).newbyteorder(hdr["endian"])
    count = nx * ny * nz
    if hdr["magic"] == b"ni1\x00":
        img = os.path.splitext(str(path).removesuffix(".gz"))[0] + ".img"
        with _open(img) as fh:
            payload = fh.read()
        offset = 0
    else:
        payload = raw
        offset = hdr["vox_offset"]
    need = offset + count * dtype.itemsize
    if len(payload) < need:
        raise FormatError("NIfTI data truncated")
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    data = data.reshape(nz, ny, nx).astype(np.float32)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)
    px, py, pz = hdr["pixdim"][1:4]
    spacing = tuple(float(s) if s > 0 else 1.0 for s in (pz, py, px))
    return data, spacing


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0), dtype=None, slope=1.0, inter=0.0):
    """Write a [z, y, x] array as a single-file NIfTI-1 (gzip if ``path`` ends in .gz).

    The file is written under a temporary name and renamed once complete.
    """
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise FormatError("write_nifti expects a 3D array")
    dtype = np.dtype(dtype or arr.dtype)
    if dtype not in CODES:
        raise FormatError(f"cannot store dtype {dtype} in NIfTI")
    nz, ny, nx = arr.shape
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, CODES[dtype], dtype.itemsize * 8)
    sz, sy, sx = spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm, sec
    hdr[344:348] = b"n+1\x00"
    body = bytes(hdr) + b"\x00" * 4 + np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes()
    path = str(path)
    tmp = path + ".partial"
    if path.endswith(".gz"):
        # mtime=0 keeps the gzip stream byte-identical across runs.
        with open(tmp, "wb") as raw_fh, gzip.GzipFile(fileobj=raw_fh, mode="wb", mtime=0,
                                                      filename="") as fh:
            fh.write(body)
    else:
        with open(tmp, "wb") as fh:
            fh.write(body)
    os.replace(tmp, path)
