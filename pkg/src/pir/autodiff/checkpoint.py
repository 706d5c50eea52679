"""The PIRK tensor container.

Layout (all integers little-endian)::

    b"PIRK"                 magic
    u32                     version (1)
    repeated until EOF:
        u32                 name length in bytes
        bytes               UTF-8 name
        u8                  dtype tag (0 float64, 1 int64, 2 uint8)
        u32                 rank
        u64 * rank          extents
        bytes               raw row-major data, little-endian

Round trips are bit-exact.  Arbitrary JSON metadata is stored as a uint8
tensor named ``__meta__``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from pir.errors import MissingArtifactError

MAGIC = b"PIRK"
VERSION = 1
META_KEY = "__meta__"

_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}


def _tag_for(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind == "b" or (arr.dtype.kind == "u" and arr.dtype.itemsize == 1):
        return 2
    return 1


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    items = list(tensors.items())
    if meta is not None:
        items.append((META_KEY, np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)))
    for name, value in items:
        arr = np.asarray(getattr(value, "data", value))
        tag = _tag_for(arr)
        arr = np.asarray(arr, dtype=_TAGS[tag], order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load(path) -> "tuple[OrderedDict[str, np.ndarray], dict]":
    """Return (tensors, meta)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a PIRK container")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PIRK version {version}")
    pos = 8
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    meta: dict = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dtype = _TAGS[tag]
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += count * dtype.itemsize
        if name == META_KEY:
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = arr
    return tensors, meta
