"""Checkpoint files: a JSON header followed by a little-endian float32 payload.

Layout::

    vitlab-ckpt 1 <header byte length>\\n
    <header JSON, sorted keys>
    <payload: tensors in header order, contiguous float32 LE>

The header lists each tensor's name, shape, byte offset into the payload and
byte length, plus free-form metadata (config echo, step).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"vitlab-ckpt"
VERSION = 1


def encode(params: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries, "dtype": "float32-le"},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    first = MAGIC + f" {VERSION} {len(header)}\n".encode()
    return first + header + b"".join(blobs)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = blob.find(b"\n")
    first = blob[:nl].split(b" ") if nl > 0 else []
    if len(first) != 3 or first[0] != MAGIC:
        raise CheckpointError("not a vitlab checkpoint")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {first[1].decode()}")
    hlen = int(first[2])
    start = nl + 1
    try:
        header = json.loads(blob[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload = memoryview(blob)[start + hlen :]
    params = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"payload truncated in tensor {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4")
        params[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return params, header["meta"]


def save_checkpoint(path, params, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, meta))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
