"""Binary container shared by datasets, checkpoints and attention dumps.

Byte layout (all integers little-endian)::

    magic        4 bytes   b"RLAB"
    version      uint32    currently 1
    header_len   uint64    length of the UTF-8 JSON header in bytes
    header       JSON      {"kind": ..., "arrays": [{"name", "dtype", "shape",
                            "offset", "nbytes"}, ...], ...user fields}
    payload      raw       arrays back to back, C order, offsets relative to
                           the first payload byte

Array dtypes are stored as numpy little-endian codes (``"<f4"``, ``"<i4"``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RLAB"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> int:
    """Write ``arrays`` plus a JSON ``header``; returns the file size."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)  # ascontiguousarray would promote 0-d to 1-d
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    full = dict(header)
    full["kind"] = kind
    full["arrays"] = entries
    head = json.dumps(full, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path.stat().st_size


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated file")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    payload = start + head_len
    arrays = {}
    for e in header["arrays"]:
        lo = payload + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(raw):
            raise ContainerError(f"{path}: array {e['name']!r} runs past end of file")
        dt = np.dtype(e["dtype"])
        arrays[e["name"]] = np.frombuffer(raw[lo:hi], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return header, arrays
