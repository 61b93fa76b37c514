"""Binary container used for feature matrices, response matrices, ridge fits and checkpoints.

Layout (all integers little-endian)::

    bytes 0-3   magic  b"NEFM"
    byte  4     format version (currently 1)
    bytes 5-8   uint32 length N of the JSON header
    bytes 9..   N bytes of UTF-8 JSON
    ...         payload: arrays back to back, row-major, little-endian

The header always carries ``kind`` and ``arrays``; each entry of ``arrays``
is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with ``offset`` counted
from the start of the payload. Everything else in the header is free-form
metadata (tr, delays, model checksum, alpha grid, ...).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NEFM"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


class ContainerError(ValueError):
    pass


def dumps(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": kind, **(dict(meta) if meta else {}), "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic")
    if blob[4] != VERSION:
        raise ContainerError(f"unsupported container version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    base = 9 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"truncated payload for {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return header, arrays


def write(path: str | os.PathLike, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write atomically and return the sha256 of the bytes written."""
    blob = dumps(kind, arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = loads(Path(path).read_bytes())
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    return header, arrays


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
