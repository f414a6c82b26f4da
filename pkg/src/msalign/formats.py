"""On-disk formats: feature matrices, checkpoints, and plain-text tables.

Every binary file starts with a 4-byte magic, a little-endian ``uint32``
version, and the byte-order mark ``0xFEFF`` stored as a little-endian
``uint16``. A reader that finds the mark byte-swapped raises
:class:`EndiannessError`; all payload numbers are little-endian.

Feature file (``MSAF``)::

    magic | version | bom | rows:u64 | dim:u64 | rows*dim float64

Checkpoint (``MSAC``)::

    magic | version | bom | cfg_len:u32 | cfg utf-8 | count:u32 |
    count x (name_len:u32 | name utf-8 | rank:u32 | rank x u64 | float64 data)

All writers go through a temporary file and ``os.replace``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import EndiannessError, FormatError, TruncationError, VersionError

FEATURE_MAGIC = b"MSAF"
CHECKPOINT_MAGIC = b"MSAC"
FORMAT_VERSION = 1
_BOM = 0xFEFF


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


def _header(magic):
    return magic + struct.pack("<IH", FORMAT_VERSION, _BOM)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"{self.path}: truncated {what}: expected {self.pos + n} bytes, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _check_header(r: _Reader, magic):
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version_raw = r.take(4, "version")
    (bom,) = r.unpack("<H", "byte-order mark")
    if bom == 0xFFFE:
        raise EndiannessError(f"{r.path}: written big-endian; only little-endian is supported")
    if bom != _BOM:
        raise FormatError(f"{r.path}: corrupt byte-order mark {bom:#06x}")
    (version,) = struct.unpack("<I", version_raw)
    if version != FORMAT_VERSION:
        raise VersionError(f"{r.path}: format version {version}, expected {FORMAT_VERSION}")


# ---------------------------------------------------------------- features

def encode_features(matrix) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FormatError("feature matrix contains non-finite values")
    return (_header(FEATURE_MAGIC) + struct.pack("<QQ", *m.shape)
            + np.ascontiguousarray(m, dtype="<f8").tobytes())


def decode_features(buf: bytes, path="<bytes>") -> np.ndarray:
    r = _Reader(buf, path)
    _check_header(r, FEATURE_MAGIC)
    rows, dim = r.unpack("<QQ", "shape")
    need = rows * dim * 8
    payload = r.buf[r.pos:]
    if len(payload) < need:
        raise TruncationError(
            f"{path}: truncated payload: expected {need} bytes, got {len(payload)}")
    if len(payload) > need:
        raise FormatError(f"{path}: {len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, dim)


def write_features(path, matrix):
    atomic_write(path, encode_features(matrix))


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- checkpoints

def encode_checkpoint(config_text: str, tensors: dict) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [_header(CHECKPOINT_MAGIC), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>"):
    """Return ``(config_text, {name: array})``."""
    r = _Reader(buf, path)
    _check_header(r, CHECKPOINT_MAGIC)
    (cfg_len,) = r.unpack("<I", "config length")
    config_text = r.take(cfg_len, "config").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name}") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return config_text, tensors


def write_checkpoint(path, config_text: str, tensors: dict):
    atomic_write(path, encode_checkpoint(config_text, tensors))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), path)


# ---------------------------------------------------------------- text tables

def format_table(header, rows) -> str:
    """Tab-separated table; floats printed with 4 decimals."""
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    lines = ["\t".join(header)]
    lines += ["\t".join(cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def parse_table(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    rows = [ln.split("\t") for ln in lines[1:]]
    return header, rows
