"""Parameter checkpoint files.

Layout (all integers little-endian)::

    b"EWCK" | version:u8 | 3 reserved zero bytes | manifest_len:u32
    manifest: UTF-8 JSON, keys sorted
        {"format": "ewir-checkpoint", "version": 1,
         "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    data: each tensor as little-endian float32, C order, at ``offset``
          bytes from the start of the data section

``dtype`` records the in-memory dtype so integer buffers (BatchNorm's
``num_batches_tracked``) come back with their original type.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"EWCK"
VERSION = 1
_HEADER = struct.Struct("<4sB3xI")


class CheckpointError(ValueError):
    pass


def dumps(state: Mapping[str, torch.Tensor]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape),
                        "dtype": str(tensor.dtype).removeprefix("torch."),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format": "ewir-checkpoint", "version": VERSION, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def loads(blob: bytes) -> "OrderedDict[str, torch.Tensor]":
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    manifest = json.loads(blob[_HEADER.size:start])
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        raw = blob[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32)).to(getattr(torch, e["dtype"]))
    return out


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(dumps(state))


def load_checkpoint(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    return loads(Path(path).read_bytes())


def manifest(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    _, _, mlen = _HEADER.unpack_from(blob)
    return json.loads(blob[_HEADER.size:_HEADER.size + mlen])
