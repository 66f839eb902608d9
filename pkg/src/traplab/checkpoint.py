"""Binary checkpoint container.

Layout::

    b"TRAPCKPT"            8-byte magic
    uint32 (little-endian) length of the JSON header in bytes
    JSON header            utf-8, keys sorted
    array payload          raw little-endian float32, concatenated in header order

The header records ``schema_version``, ``kind``, a free-form ``meta`` object and,
for each array, its ``name``, ``shape``, ``dtype`` (always ``"<f4"``), byte
``offset`` into the payload and ``nbytes``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"TRAPCKPT"
SCHEMA_VERSION = 1


def _as_array(value: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def to_bytes(arrays: Mapping[str, torch.Tensor | np.ndarray], kind: str, meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = _as_array(value)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "meta": dict(meta or {}),
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{source}: unsupported schema_version {header.get('schema_version')!r}")
    payload = memoryview(data)[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] != "<f4":
            raise FormatError(f"{source}: array {entry['name']} has dtype {entry['dtype']}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise FormatError(f"{source}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
    return header, arrays


def save(path: str | Path, arrays: Mapping[str, torch.Tensor | np.ndarray], kind: str, meta: Mapping[str, Any] | None = None) -> str:
    """Write a checkpoint; returns the sha256 of the written bytes."""
    data = to_bytes(arrays, kind, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    return from_bytes(p.read_bytes(), source=str(p))
