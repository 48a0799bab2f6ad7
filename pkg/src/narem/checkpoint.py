"""Binary checkpoint files: versioned header plus named float64 matrices.

Layout (all integers little-endian):

    magic   8 bytes  b"NAREMCKP"
    version u32      currently 1
    config  u32 length + UTF-8 JSON blob
    count   u32
    entries repeated: u16 name length + name, u32 rows, u32 cols,
            rows*cols float64 payload

Round trips are bit-exact; every array must be two-dimensional.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NAREMCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            if arr.ndim != 2:
                raise CheckpointError(f"array {name!r} is not a matrix (ndim={arr.ndim})")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + blob_len].decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        nbytes = rows * cols * 8
        arrays[name] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(rows, cols).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after {count} arrays")
    return config, arrays
