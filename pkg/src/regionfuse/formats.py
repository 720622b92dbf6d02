"""Bit-exact file formats: CATN tensor containers and PGM/PPM rasters.

CATN container layout (all integers unsigned 32-bit little-endian):

    bytes 0..3    magic "CATN"
    bytes 4..7    format version (currently 1)
    bytes 8..11   rank r
    next 4*r      dims, outermost first
    next 4        dtype code (0 = 32-bit float, little-endian)
    rest          payload, row-major, prod(dims) * 4 bytes

Rank 0 is a scalar with an empty dim list and a 4-byte payload. Writers are
deterministic byte for byte and atomic (write to a temp file in the target
directory, then rename).
"""

import os
import struct
import tempfile

import numpy as np

from .errors import BadMagic, TruncatedPayload, UnsupportedVersion

MAGIC = b"CATN"
VERSION = 1
DTYPE_F32 = 0


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, tensor) -> None:
    """Serialize an array as a CATN container (values stored as float32)."""
    # note: ascontiguousarray would promote rank-0 tensors to rank 1
    arr = np.asarray(tensor, dtype=np.float32, order="C")
    header = struct.pack("<4sII", MAGIC, VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    _atomic_write(path, header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a CATN container back into a float32 array (lossless round trip)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not a CATN container")
    version, rank = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    need = 12 + 4 * rank + 4
    if len(blob) < need:
        raise TruncatedPayload(f"{path}: header truncated")
    dims = struct.unpack(f"<{rank}I", blob[12:12 + 4 * rank])
    (dtype_code,) = struct.unpack("<I", blob[12 + 4 * rank:need])
    if dtype_code != DTYPE_F32:
        raise UnsupportedVersion(f"{path}: dtype code {dtype_code}")
    count = 1
    for d in dims:
        count *= d
    payload = blob[need:]
    if len(payload) != 4 * count:
        raise TruncatedPayload(f"{path}: payload {len(payload)} bytes, "
                               f"expected {4 * count}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True)
    return values.reshape(dims)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

def to_uint8(values) -> np.ndarray:
    """Map floats in [0, 1] to 8-bit; clipping and rounding are deterministic."""
    arr = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raster) -> np.ndarray:
    return np.asarray(raster, dtype=np.float64) / 255.0


def write_pgm(path, gray) -> None:
    """Binary PGM (P5, 8-bit). Masks use 255 = inside."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim != 2:
        raise ValueError("PGM wants a 2-D grayscale array")
    h, w = arr.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_ppm(path, rgb) -> None:
    """Binary PPM (P6, 8-bit RGB)."""
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM wants an (H, W, 3) array")
    h, w, _ = arr.shape
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _read_netpbm(path, magic: str, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(magic.encode("ascii")):
        raise BadMagic(f"{path}: expected {magic} raster")
    # header tokens: magic, width, height, maxval; '#' starts a comment
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayload(f"{path}: raster header truncated")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise UnsupportedVersion(f"{path}: only 8-bit rasters are supported")
    payload = blob[pos:pos + w * h * channels]
    if len(payload) != w * h * channels:
        raise TruncatedPayload(f"{path}: raster payload truncated")
    arr = np.frombuffer(payload, dtype=np.uint8).copy()
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, "P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, "P6", 3)
