"""Binary parameter container: flat list of named double arrays.

Layout (little-endian):
    magic   4 bytes  b"CVCK"
    version 1 byte   0x01
    count   uint32
    entry*  { name_len uint16, name utf-8, ndim uint8,
              dims int64 * ndim, values float64 * prod(dims) row-major }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"CVCK"
VERSION = 1


def save_params(path, named_arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            shape = arr.shape  # before ascontiguousarray, which promotes 0-d to 1-d
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}q", *shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            ndim = blob[off]
            off += 1
            dims = struct.unpack_from(f"<{ndim}q", blob, off)
            off += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt container") from e
    if len(out) != count:
        raise CheckpointError(f"{path}: duplicate parameter names")
    return out
