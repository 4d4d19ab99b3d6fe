"""Binary surfel-map files.

``SMAP`` | version u32 | feature_dim u32 | count u64, then per surfel
position f32x3, normal f32x3, radius f32, weight f32, feature f32xF, id u64.
All little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..core import SurfelMap

MAGIC = b"SMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class MapFormatError(ValueError):
    pass


def _record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([("position", "<f4", 3), ("normal", "<f4", 3), ("radius", "<f4"), ("weight", "<f4"),
                     ("feature", "<f4", feature_dim), ("id", "<u8")])


def map_to_bytes(smap: SurfelMap) -> bytes:
    rec = np.zeros(len(smap), dtype=_record_dtype(smap.feature_dim))
    rec["position"] = smap.positions
    rec["normal"] = smap.normals
    rec["radius"] = smap.radii
    rec["weight"] = smap.weights
    rec["feature"] = smap.features
    rec["id"] = smap.ids
    return _HEADER.pack(MAGIC, VERSION, smap.feature_dim, len(smap)) + rec.tobytes()


def map_from_bytes(data: bytes, source: str = "<bytes>") -> SurfelMap:
    if len(data) < _HEADER.size:
        raise MapFormatError(f"{source}: truncated header")
    magic, version, fdim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MapFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise MapFormatError(f"{source}: unsupported version {version}")
    dt = _record_dtype(fdim)
    if len(data) != _HEADER.size + count * dt.itemsize:
        raise MapFormatError(f"{source}: expected {count} records, file size disagrees")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    smap = SurfelMap(fdim, np.float32)
    if count:
        smap.append(rec["position"], rec["normal"], rec["radius"], rec["weight"], rec["feature"],
                    ids=rec["id"].astype(np.int64))
    return smap


def save_map(smap: SurfelMap, path) -> None:
    Path(path).write_bytes(map_to_bytes(smap))


def load_map(path) -> SurfelMap:
    return map_from_bytes(Path(path).read_bytes(), str(path))
