"""Self-describing binary tensor container.

Layout: 8-byte magic ``MELTENS1``, u32 dtype code (0 = float32), u32 rank,
rank * u32 shape, then row-major little-endian float32 payload.  Mel
exports carry an optional JSON sidecar (``<name>.json``) with the feature
settings needed by a vocoder.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MELTENS1"
_DTYPE_F32 = 0


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", _DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor file {path}: {e}") from e
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: bad magic, not a tensor container")
    dtype_code, rank = struct.unpack_from("<II", blob, 8)
    if dtype_code != _DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype_code}")
    shape = struct.unpack_from(f"<{rank}I", blob, 16)
    offset = 16 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise DataError(f"{path}: truncated payload")
    return data.reshape(shape).astype(np.float32)


def save_sidecar(path, metadata: dict) -> None:
    Path(path).with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))


def load_sidecar(path) -> dict | None:
    p = Path(path).with_suffix(".json")
    if not p.exists():
        return None
    return json.loads(p.read_text())
