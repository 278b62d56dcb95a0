"""Versioned binary container for graphs, model checkpoints, and embeddings.

Layout (all integers little-endian):

    magic     8 bytes   b"FLOWSAGE"
    kind      4 bytes   artifact tag, e.g. b"GRPH", b"DGIM", b"GBDT", b"EMB_"
    version   uint32
    meta_len  uint64    followed by UTF-8 JSON metadata
    n_arrays  uint32
    per array:
        name_len uint16, name UTF-8
        dtype    uint8   (0=float64, 1=int64, 2=uint8)
        ndim     uint8, dims uint64 * ndim
        payload  raw little-endian bytes

Loading an artifact with the wrong magic, kind, or version fails loudly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FLOWSAGE"
_DTYPES = {0: "<f8", 1: "<i8", 2: "|u1"}
_DTYPE_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_container(
    path: str | Path,
    kind: bytes,
    version: int,
    meta: dict,
    arrays: dict[str, np.ndarray],
) -> None:
    if len(kind) != 4:
        raise ValueError("kind must be exactly 4 bytes")
    chunks = [MAGIC, kind, struct.pack("<I", version)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tag = _DTYPE_TAGS.get(arr.dtype.newbyteorder("<"))
        if tag is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for array '{name}'")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_container(
    path: str | Path, kind: bytes, version: int
) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if bytes(view[:8]) != MAGIC:
        raise DataError(f"{path}: not a flowsage artifact (bad magic)")
    if bytes(view[8:12]) != kind:
        raise DataError(
            f"{path}: artifact kind {bytes(view[8:12])!r} does not match "
            f"expected {kind!r}"
        )
    (got_version,) = struct.unpack_from("<I", raw, 12)
    if got_version != version:
        raise DataError(
            f"{path}: format version {got_version} does not match expected {version}"
        )
    offset = 16
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    meta = json.loads(bytes(view[offset : offset + meta_len]).decode("utf-8"))
    offset += meta_len
    (n_arrays,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        dtype = np.dtype(_DTYPES[tag])
        count = int(np.prod(dims)) if ndim else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        arrays[name] = arr.reshape(dims).copy()
        offset += nbytes
    return meta, arrays
