"""Little-endian binary container used by checkpoints, calibration sets and route databases.

Layout::

    magic      8 bytes   e.g. b"SPCKPT01"
    hlen       uint64 LE length of the JSON header
    header     UTF-8 JSON, keys sorted, with an "arrays" table
    payload    concatenated raw arrays, each at the offset named in the table

Every array is stored little-endian (``<f4`` for weights, ``<i4``/``<i8`` for
indices). Writing the same content twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import InvalidInput

_ALLOWED = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "<u1"}


def _le_dtype(arr: np.ndarray) -> str:
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key == "b1":
        key = "u1"
    if key not in _ALLOWED:
        raise InvalidInput(f"unsupported dtype {arr.dtype}")
    return _ALLOWED[key]


def write_container(path, magic: bytes, header: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    if len(magic) != 8:
        raise InvalidInput("magic must be exactly 8 bytes")
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        raw = np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full = dict(header)
    full["arrays"] = table
    hbytes = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise InvalidInput(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        start = base + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
