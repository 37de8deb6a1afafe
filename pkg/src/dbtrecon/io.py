"""Binary volume and projection files, slice export and atomic writes.

Both binary formats are little-endian with a fixed header followed by the raw
payload. Volumes are stored x-fastest, projection frames angle by angle with
u fastest inside a frame.

Volume header::

    magic  b"DBTVOL\\0\\0"
    u32    version
    u32    n_x, n_y, n_z
    f64    dx, dy, dz
    f64    origin x, y, z
    u32    dtype code (4 = float32, 8 = float64)

Projection header::

    magic  b"DBTPRJ\\0\\0"
    u32    version
    u32    n_angles, n_u, n_v
    f64    pitch
    u32    dtype code
    f64    angles[n_angles] (degrees)
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "FormatError",
    "VersionError",
    "TruncatedFileError",
    "HeaderMismatchError",
    "DtypeMismatchError",
    "VolumeData",
    "ProjectionData",
    "atomic_write",
    "atomic_write_bytes",
    "atomic_write_text",
    "write_volume",
    "read_volume",
    "write_projections",
    "read_projections",
    "export_slice",
    "read_pgm",
    "sha256_file",
]

FORMAT_VERSION = 1
VOLUME_MAGIC = b"DBTVOL\0\0"
PROJ_MAGIC = b"DBTPRJ\0\0"

_VOL_HEAD = struct.Struct("<8sI3I3d3dI")
_PROJ_HEAD = struct.Struct("<8sI3IdI")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(IOError):
    """Base class for unreadable or inconsistent files."""


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class HeaderMismatchError(FormatError):
    pass


class DtypeMismatchError(FormatError):
    pass


class VolumeData(NamedTuple):
    values: np.ndarray
    spacing: tuple
    origin: tuple


class ProjectionData(NamedTuple):
    values: np.ndarray
    pitch: float
    angles: np.ndarray


def atomic_write(path, write_fn, mode: str = "wb"):
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            write_fn(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_bytes(path, data: bytes):
    return atomic_write(path, lambda fh: fh.write(data))


def atomic_write_text(path, text: str):
    return atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    if dt.kind != "f" or dt.itemsize not in _DTYPES:
        raise TypeError(f"only float32 and float64 can be stored, got {dt}")
    return dt.itemsize


def _check_dtype(code: int, want, path) -> np.dtype:
    if code not in _DTYPES:
        raise HeaderMismatchError(f"{path}: unknown dtype code {code}")
    stored = _DTYPES[code]
    if want is not None and np.dtype(want).itemsize != stored.itemsize:
        raise DtypeMismatchError(f"{path}: file holds {stored.name}, requested {np.dtype(want).name}")
    return stored


def _read_exact(raw: bytes, offset: int, nbytes: int, path, what: str) -> bytes:
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(f"{path}: {what} needs {nbytes} bytes, "
                                 f"only {max(len(raw) - offset, 0)} present")
    return raw[offset:offset + nbytes]


def write_volume(path, v: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0),
                 origin: Sequence[float] = (0.0, 0.0, 0.0), dtype=None) -> Path:
    """Store a 3-D array; ``dtype`` defaults to the array's own float type."""
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {v.shape}")
    code = _dtype_code(dtype if dtype is not None else v.dtype)
    head = _VOL_HEAD.pack(VOLUME_MAGIC, FORMAT_VERSION, *v.shape,
                          *(float(s) for s in spacing), *(float(o) for o in origin), code)
    payload = np.asarray(v, dtype=_DTYPES[code]).tobytes(order="F")
    return atomic_write_bytes(path, head + payload)


def read_volume(path, dtype=None) -> VolumeData:
    """Read a volume file; ``dtype`` (if given) must match the stored type."""
    raw = Path(path).read_bytes()
    head = _read_exact(raw, 0, _VOL_HEAD.size, path, "header")
    magic, version, nx, ny, nz, dx, dy, dz, ox, oy, oz, code = _VOL_HEAD.unpack(head)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    dt = _check_dtype(code, dtype, path)
    nbytes = nx * ny * nz * dt.itemsize
    body = _read_exact(raw, _VOL_HEAD.size, nbytes, path, "payload")
    if len(raw) != _VOL_HEAD.size + nbytes:
        raise HeaderMismatchError(f"{path}: {len(raw) - _VOL_HEAD.size - nbytes} trailing bytes "
                                  f"after a {nx}x{ny}x{nz} payload")
    values = np.frombuffer(body, dtype=dt).reshape((nx, ny, nz), order="F")
    return VolumeData(values.astype(dt.newbyteorder("="), copy=True), (dx, dy, dz), (ox, oy, oz))


def write_projections(path, p: np.ndarray, pitch: float, angles: Sequence[float], dtype=None) -> Path:
    p = np.asarray(p)
    if p.ndim != 3:
        raise ValueError(f"projections must be (n_angles, n_u, n_v), got {p.shape}")
    angles = np.asarray(angles, dtype="<f8")
    if angles.shape != (p.shape[0],):
        raise ValueError(f"{angles.size} angles for {p.shape[0]} frames")
    code = _dtype_code(dtype if dtype is not None else p.dtype)
    head = _PROJ_HEAD.pack(PROJ_MAGIC, FORMAT_VERSION, *p.shape, float(pitch), code)
    # each frame u-fastest
    payload = np.asarray(p, dtype=_DTYPES[code]).transpose(0, 2, 1).tobytes(order="C")
    return atomic_write_bytes(path, head + angles.tobytes() + payload)


def read_projections(path, dtype=None) -> ProjectionData:
    raw = Path(path).read_bytes()
    head = _read_exact(raw, 0, _PROJ_HEAD.size, path, "header")
    magic, version, na, nu, nv, pitch, code = _PROJ_HEAD.unpack(head)
    if magic != PROJ_MAGIC:
        raise FormatError(f"{path}: not a projection file")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    dt = _check_dtype(code, dtype, path)
    off = _PROJ_HEAD.size
    angles = np.frombuffer(_read_exact(raw, off, 8 * na, path, "angle list"), dtype="<f8")
    off += 8 * na
    nbytes = na * nu * nv * dt.itemsize
    body = _read_exact(raw, off, nbytes, path, "payload")
    if len(raw) != off + nbytes:
        raise HeaderMismatchError(f"{path}: {len(raw) - off - nbytes} trailing bytes "
                                  f"after {na} frames of {nu}x{nv}")
    values = np.frombuffer(body, dtype=dt).reshape((na, nv, nu)).transpose(0, 2, 1)
    return ProjectionData(np.ascontiguousarray(values, dtype=dt.newbyteorder("=")), float(pitch),
                          angles.astype(np.float64))


def export_slice(v: np.ndarray, k: int, path, window: Optional[Sequence[float]] = None) -> Path:
    """Write slice ``k`` as a 16-bit binary PGM.

    Values are mapped linearly from ``window = (low, high)`` (slice min/max by
    default) onto 0..65535 and clipped. A flat window maps to mid-gray. Rows of
    the image run along y, columns along x.
    """
    v = np.asarray(v)
    if not 0 <= k < v.shape[2]:
        raise IndexError(f"slice {k} outside 0..{v.shape[2] - 1}")
    img = np.asarray(v[:, :, k], dtype=np.float64).T
    lo, hi = (float(img.min()), float(img.max())) if window is None else map(float, window)
    if hi > lo:
        scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 65535.0
        pix = np.rint(scaled).astype(">u2")
    else:
        pix = np.full(img.shape, 32768, dtype=">u2")
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    return atomic_write_bytes(path, head + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`export_slice` for its own files; returns (rows, cols) uint16."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
