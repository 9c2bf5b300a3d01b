"""Binary container shared by sample files and checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"SGSG" (sample) or b"SGCK" (checkpoint)
    version    u32
    hdr_len    u32       byte length of the JSON header
    header     hdr_len   UTF-8 JSON, keys sorted
    padding    0-7       zero bytes up to an 8-byte boundary
    data       ...       raw array bytes, C order

The header holds an ``arrays`` directory of ``{name, dtype, shape, offset,
nbytes}`` records, where ``offset`` is relative to the start of the data
section, plus any caller metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

VERSION = 1
_ALIGN = 8

_ALLOWED_DTYPES = {"<f4", "<f8", "|u1", "<i4", "<i8", "|b1"}


class ContainerError(ValueError):
    """Malformed or unexpected container file."""


def _canonical_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.str not in _ALLOWED_DTYPES:
        raise ContainerError(f"unsupported dtype {arr.dtype} for container storage")
    return dt


def encode(magic: bytes, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    if "arrays" in meta:
        raise ValueError("'arrays' is a reserved header key")
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _canonical_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        directory.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % _ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = dict(meta)
    header["arrays"] = directory
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = magic + struct.pack("<II", VERSION, len(hdr)) + hdr
    prefix += b"\0" * ((-len(prefix)) % _ALIGN)
    return prefix + b"".join(chunks)


def decode(blob: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 12 or blob[:4] != magic:
        raise ContainerError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    version, hdr_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    end = 12 + hdr_len
    if end > len(blob):
        raise ContainerError("truncated header")
    try:
        header = json.loads(blob[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    base = end + (-end) % _ALIGN
    arrays = {}
    for rec in header.pop("arrays", []):
        if rec["dtype"] not in _ALLOWED_DTYPES:
            raise ContainerError(f"array {rec['name']!r} has unsupported dtype {rec['dtype']}")
        dt = np.dtype(rec["dtype"])
        start = base + rec["offset"]
        stop = start + rec["nbytes"]
        count = int(np.prod(rec["shape"], dtype=np.int64))
        if stop > len(blob) or count * dt.itemsize != rec["nbytes"]:
            raise ContainerError(f"array {rec['name']!r} is truncated or inconsistent")
        arrays[rec["name"]] = np.frombuffer(blob, dtype=dt, count=count,
                                            offset=start).reshape(rec["shape"]).copy()
    return arrays, header


def write(path, magic: bytes, arrays, meta) -> None:
    Path(path).write_bytes(encode(magic, arrays, meta))


def read(path, magic: bytes):
    return decode(Path(path).read_bytes(), magic)
