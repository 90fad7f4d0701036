"""DFCKPT1 checkpoint files.

Layout::

    b"DFCKPT1\\n" | uint64 LE header length | JSON header | float32 LE payload

The header carries the model config and ``name -> {shape, offset}`` where
offset counts float32 elements into the payload. Files are validated in full
before any array is materialized.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterSet

MAGIC = b"DFCKPT1\n"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def to_bytes(params: ParameterSet, meta: dict | None = None) -> bytes:
    entries, chunks, offset = {}, [], 0
    for name, arr in params.items():
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        offset += arr.size
    header = {
        "format": "DFCKPT1",
        "config": params.config.to_dict(),
        "tensors": entries,
        "payload_elems": offset,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[ParameterSet, dict]:
    if len(blob) < len(MAGIC) and MAGIC.startswith(blob):
        raise Truncated(f"checkpoint is {len(blob)} bytes, shorter than its magic")
    if blob[: len(MAGIC)] != MAGIC:
        raise VersionMismatch("not a DFCKPT1 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + _LEN.size:
        raise Truncated("file ends inside the header length field")
    (hlen,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) < pos + hlen:
        raise Truncated("file ends inside the JSON header")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format") != "DFCKPT1":
        raise VersionMismatch(f"unsupported format {header.get('format')!r}")
    pos += hlen
    config = ModelConfig.from_dict(header["config"])
    expected = config.param_shapes()
    entries = header["tensors"]
    if set(entries) != set(expected):
        raise ShapeMismatch("tensor names differ from those implied by the config")
    total = header["payload_elems"]
    for name, want in expected.items():
        shape = tuple(entries[name]["shape"])
        if shape != want:
            raise ShapeMismatch(f"{name}: header shape {shape} but config implies {want}")
        off = entries[name]["offset"]
        if off < 0 or off + int(np.prod(shape)) > total:
            raise ShapeMismatch(f"{name}: offset {off} outside payload")
    payload = blob[pos:]
    if len(payload) != 4 * total:
        raise Truncated(f"payload has {len(payload)} bytes, header promises {4 * total}")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for name, shape in expected.items():
        off = entries[name]["offset"]
        tensors[name] = flat[off : off + int(np.prod(shape))].reshape(shape).astype(np.float32)
    return ParameterSet(config, tensors), header.get("meta", {})


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(path: str | Path, params: ParameterSet, meta: dict | None = None) -> None:
    atomic_write(path, to_bytes(params, meta))


def load(path: str | Path) -> ParameterSet:
    return from_bytes(Path(path).read_bytes())[0]
