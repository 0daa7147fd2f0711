"""Matrix file formats.

CSV: header ``f0,f1,...`` then one row per record, strict float parsing.
f32bin: ``b"DMIA"``, u32 version (=1), u32 rows, u32 cols, then rows*cols
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMIA"
F32BIN_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetFormatError(ValueError):
    """Raised for unreadable dataset files; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def _parse_float(tok: str, where: str) -> float:
    tok = tok.strip()
    try:
        v = float(tok)
    except ValueError:
        raise DatasetFormatError("bad_float", f"{where}: cannot parse {tok!r} as a float") from None
    if not np.isfinite(v):
        raise DatasetFormatError("bad_float", f"{where}: non-finite value {tok!r}")
    return v


def load_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError("malformed_header", "empty file")
    header = [h.strip() for h in rows[0]]
    if header != [f"f{i}" for i in range(len(header))] or not header:
        raise DatasetFormatError("malformed_header", f"expected f0,f1,..., got {rows[0]!r}")
    d = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d:
            raise DatasetFormatError("ragged_rows", f"line {lineno}: {len(row)} fields, expected {d}")
        data.append([_parse_float(t, f"line {lineno}") for t in row])
    return np.asarray(data, dtype=np.float64).reshape(len(data), d)


def save_csv(path, X) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def load_f32bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if not MAGIC.startswith(raw[:4]):
            raise DatasetFormatError("magic_mismatch", "not a DMIA file")
        raise DatasetFormatError("truncated", "file shorter than its header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError("magic_mismatch", f"bad magic {magic!r}")
    if version != F32BIN_VERSION:
        raise DatasetFormatError("unsupported_version", f"version {version}")
    need = rows * cols * 4
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise DatasetFormatError("truncated", f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise DatasetFormatError("trailing_bytes", f"{len(payload) - need} unexpected trailing bytes")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError("bad_float", "non-finite value in payload")
    return arr


def save_f32bin(path, X) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, F32BIN_VERSION, X.shape[0], X.shape[1]))
        fh.write(X.astype("<f4").tobytes())


def load_dataset(path, format: str | None = None) -> np.ndarray:
    fmt = format or _guess(path)
    if fmt == "csv":
        return load_csv(path)
    if fmt == "f32bin":
        return load_f32bin(path)
    raise ValueError(f"unknown format {fmt!r}")


def save_dataset(path, X, format: str | None = None) -> None:
    fmt = format or _guess(path)
    if fmt == "csv":
        save_csv(path, X)
    elif fmt == "f32bin":
        save_f32bin(path, X)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _guess(path) -> str:
    return "f32bin" if str(path).endswith((".bin", ".f32bin")) else "csv"


def extension(fmt: str) -> str:
    return {"csv": ".csv", "f32bin": ".f32bin"}[fmt]
