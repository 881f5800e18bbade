"""Versioned weight-blob format shared by autoencoder and denoiser checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"DDMDWTS\\0"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length N in bytes
    16      N     UTF-8 JSON header: {"tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    16+N    ...   tensor data, raw little-endian float32, C order; ``offset`` is
                  relative to the start of this section

Tensors are written in state-dict order. Only floating point tensors are
supported; they are stored as float32 regardless of their in-memory dtype.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DDMDWTS\0"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def encode_state(state: dict[str, torch.Tensor]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        if not tensor.dtype.is_floating_point:
            raise WeightFormatError(f"tensor {name!r} has non-float dtype {tensor.dtype}")
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, *chunks])


def decode_state(blob: bytes) -> "OrderedDict[str, torch.Tensor]":
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise WeightFormatError("not a weight blob (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"corrupt weight header: {exc}") from exc
    data = memoryview(blob)[16 + hlen :]
    state: OrderedDict[str, torch.Tensor] = OrderedDict()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(data):
            raise WeightFormatError(f"tensor {e['name']!r} is truncated or mis-sized")
        arr = np.frombuffer(data[e["offset"] : e["offset"] + e["nbytes"]], dtype="<f4")
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return state


def save_state(path: str | Path, state: dict[str, torch.Tensor]) -> str:
    """Write a weight blob and return its sha256 hex digest."""
    blob = encode_state(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_state(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    return decode_state(Path(path).read_bytes())


def state_digest(module: torch.nn.Module) -> str:
    """sha256 over a module's parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
