"""Binary file formats shared across modules.

Two formats live here:

* matrix files — header ``magic | rows u64 | cols u64 | flags u32`` followed
  by row-major little-endian float64 data.  When the DP flag bit is set the
  header is extended with the ``(C, epsilon)`` pair under which the matrix
  was released.
* parameter files — versioned flat container of named float64 blocks with a
  JSON metadata header, used for encoder weights and model checkpoints.

All integers are little-endian.  The formats are deliberately trivial so
that any language can read them with a dozen lines of code.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MATRIX_MAGIC = b"OCMX0001"
PARAMS_MAGIC = b"OCPR0001"

# matrix header flag bits
FLAG_DP_PROTECTED = 0x1


def write_matrix(path: str | Path, matrix: np.ndarray, dp_params: tuple[float, float] | None = None) -> None:
    """Write a 2-D float64 matrix.  ``dp_params=(C, epsilon)`` marks it DP-protected."""
    m = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2:
        raise DataError(f"matrix files hold 2-D arrays, got shape {m.shape}")
    flags = FLAG_DP_PROTECTED if dp_params is not None else 0
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQI", m.shape[0], m.shape[1], flags))
        if dp_params is not None:
            fh.write(struct.pack("<dd", float(dp_params[0]), float(dp_params[1])))
        fh.write(m.astype("<f8").tobytes())


def read_matrix(path: str | Path) -> tuple[np.ndarray, tuple[float, float] | None]:
    """Read a matrix file; returns (matrix, dp_params-or-None)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MATRIX_MAGIC:
            raise DataError(f"{path}: not a matrix file (magic {magic!r})")
        rows, cols, flags = struct.unpack("<QQI", fh.read(20))
        dp_params = None
        if flags & FLAG_DP_PROTECTED:
            c, eps = struct.unpack("<dd", fh.read(16))
            dp_params = (c, eps)
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise DataError(f"{path}: truncated matrix file")
    return data.reshape(rows, cols).copy(), dp_params


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """Plain CSV dump of a matrix for eyeballing."""
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.17g")


def write_params(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 parameter blocks plus a JSON metadata header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            block = np.ascontiguousarray(np.asarray(params[name], dtype=np.float64))
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", block.ndim))
            fh.write(struct.pack(f"<{block.ndim}Q", *block.shape))
            fh.write(block.astype("<f8").tobytes())


def read_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a parameter file; returns (params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != PARAMS_MAGIC:
            raise DataError(f"{path}: not a parameter file (magic {magic!r})")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * 8), dtype="<f8")
            if data.size != n:
                raise DataError(f"{path}: truncated block {name!r}")
            params[name] = data.reshape(shape).copy()
    return params, meta
