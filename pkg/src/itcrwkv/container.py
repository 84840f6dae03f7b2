"""Self-describing binary container for datasets and checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"ITCRWKV\\0"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: kind, metadata, array table, payload size, CRC-32
    payload   arrays back to back, raw little-endian (float64 as '<f8', ints as '<i8')

Each array-table entry records ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes`` relative to the start of the payload.  Floats are stored as raw bytes,
so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ITCRWKV\x00"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class CorruptFileError(ValueError):
    pass


class VersionError(ValueError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"container format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


def _code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": table,
                         "payload_bytes": len(payload), "crc32": zlib.crc32(payload)},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Load ``(arrays, meta)``; raises CorruptFileError or VersionError on bad input."""
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(blob) < fixed or blob[:len(MAGIC)] != MAGIC:
        raise CorruptFileError(f"{path}: not a container file (bad magic or truncated preamble)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    if len(blob) < fixed + hlen:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    payload = blob[fixed + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, header says "
                               f"{header.get('payload_bytes')} (truncated?)")
    if zlib.crc32(payload) != header.get("crc32"):
        raise CorruptFileError(f"{path}: payload checksum mismatch")
    if kind is not None and header.get("kind") != kind:
        raise CorruptFileError(f"{path}: holds a {header.get('kind')!r}, expected {kind!r}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
