"""Binary embedding store.

Layout (all integers little-endian)::

    header   magic b"MMFS" | version u32 | dim u32 | count u64        (20 bytes)
    record   id_len u32 | id UTF-8 bytes | dim x float32

Records follow the header back to back; nothing may trail the last one.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMFS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_ID_LEN = struct.Struct("<I")


class FeatureStoreError(Exception):
    code = "E_STORE"

    def __init__(self, message: str, record_index: int | None = None):
        self.record_index = record_index
        super().__init__(f"[{self.code}] {message}")


class BadMagicError(FeatureStoreError):
    code = "E_MAGIC"


class BadVersionError(FeatureStoreError):
    code = "E_VERSION"


class DimMismatchError(FeatureStoreError):
    code = "E_DIM"


class TruncatedError(FeatureStoreError):
    code = "E_TRUNCATED"


class TrailingDataError(FeatureStoreError):
    code = "E_TRAILING"


class DuplicateIdError(FeatureStoreError):
    code = "E_DUPLICATE"


def write_feature_store(entries: Mapping[str, np.ndarray], path: str | Path, dim: int | None = None) -> None:
    """Write ``entries`` atomically; every vector must share one dimension."""
    dims = {np.asarray(v).reshape(-1).shape[0] for v in entries.values()}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise DimMismatchError(f"vectors have differing dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(entries)))
        for key, vec in entries.items():
            raw = key.encode("utf-8")
            fh.write(_ID_LEN.pack(len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").reshape(-1).tobytes())
    os.replace(tmp, path)


def read_feature_store(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data)]:
            raise BadMagicError("not a feature store file")
        raise TruncatedError("file ends inside the header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if dim == 0 and count > 0:
        raise DimMismatchError("header declares dim 0 with non-empty payload")
    vec_bytes = 4 * dim
    out: dict[str, np.ndarray] = {}
    pos = _HEADER.size
    for i in range(count):
        if pos + _ID_LEN.size > len(data):
            raise TruncatedError(f"truncated at record {i} (id length)", record_index=i)
        (n,) = _ID_LEN.unpack_from(data, pos)
        pos += _ID_LEN.size
        if pos + n + vec_bytes > len(data):
            raise TruncatedError(f"truncated at record {i}", record_index=i)
        try:
            key = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureStoreError(f"record {i} id is not valid UTF-8", record_index=i) from None
        pos += n
        if key in out:
            raise DuplicateIdError(f"duplicate id {key!r} at record {i}", record_index=i)
        out[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).copy()
        pos += vec_bytes
    if pos != len(data):
        raise TrailingDataError(f"{len(data) - pos} bytes after the declared {count} records")
    return out
