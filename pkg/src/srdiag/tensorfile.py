"""Named-tensor container.

Layout::

    8 bytes    little-endian uint64 N, the header length
    N bytes    UTF-8 JSON header
    ...        raw little-endian float32 tensor data

The header is ``{"format": "srdiag-tensors", "version": 1, "metadata": {...},
"tensors": {name: {"dtype": "float32", "shape": [...], "offset": o,
"nbytes": n}}}`` where ``offset`` is relative to the start of the data
section.  Tensors are written in insertion order, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

FORMAT = "srdiag-tensors"
VERSION = 1
_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        if not np.issubdtype(arr.dtype, np.floating):
            raise ContainerError(f"only floating-point tensors can be stored, got {arr.dtype}")
        arr = arr.astype(np.float32)
    return np.asarray(arr, dtype=_DTYPE, order="C")


def encode(tensors: Mapping, metadata: Mapping | None = None) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = _as_array(value)
        raw = arr.tobytes()
        entries[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "metadata": dict(metadata or {}), "tensors": entries}
    blob = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 8:
        raise ContainerError(f"{source}: truncated container (no header length)")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise ContainerError(f"{source}: truncated container (header length {n} exceeds file)")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{source}: corrupt header: {exc}") from None
    if header.get("format") != FORMAT:
        raise ContainerError(f"{source}: not an {FORMAT} container")
    if header.get("version") != VERSION:
        raise ContainerError(f"{source}: unsupported container version {header.get('version')!r}, expected {VERSION}")
    body = memoryview(data)[8 + n:]
    tensors = {}
    for name, info in header["tensors"].items():
        if info.get("dtype") != "float32":
            raise ContainerError(f"{source}: tensor {name!r} has unsupported dtype {info.get('dtype')!r}")
        shape = tuple(info["shape"])
        start, nbytes = info["offset"], info["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or start + nbytes > len(body):
            raise ContainerError(f"{source}: tensor {name!r} is truncated or has an inconsistent size")
        tensors[name] = np.frombuffer(body[start:start + nbytes], dtype=_DTYPE).reshape(shape).astype(np.float32)
    return tensors, header["metadata"]


def save(path, tensors: Mapping, metadata: Mapping | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, metadata))
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such tensor file: {path}")
    return decode(path.read_bytes(), str(path))
