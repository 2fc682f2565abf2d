"""Binary array format shared by every persisted artifact.

Layout: two little-endian unsigned 64-bit integers ``(rows, cols)`` followed
by ``rows * cols`` little-endian float64 values in row-major order. Vectors are
stored as a single column.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

_HEADER = np.dtype("<u8")
_DATA = np.dtype("<f8")


def write_array(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValidationError(f"only 1-D or 2-D arrays can be stored, got ndim={arr.ndim}")
    header = np.array(arr.shape, dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(arr, dtype=_DATA).tobytes())


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValidationError(f"{path}: truncated header")
    rows, cols = (int(v) for v in np.frombuffer(raw[:16], dtype=_HEADER))
    expected = 16 + 8 * rows * cols
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[16:], dtype=_DATA).astype(np.float64)
    return data.reshape(rows, cols)


def write_json(path: str | Path, payload) -> None:
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())
