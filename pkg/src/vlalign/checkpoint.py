"""Single-file checkpoint format.

Layout (all integers little-endian):
  magic 'IVLC' | u32 format version | 32-byte sha256 config digest |
  per tensor: u32 name length | name UTF-8 | u8 dtype code |
              u8 rank | rank x u64 dims | raw row-major data

Tensors are written sorted by name, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor

MAGIC = b"IVLC"
VERSION = 1

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def config_digest(obj) -> bytes:
    """sha256 over the canonical JSON encoding of a config mapping."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).digest()


def assembly_digest(assembly) -> bytes:
    return config_digest(
        {
            "vit": asdict(assembly.vit_cfg),
            "middleware": asdict(assembly.mw_cfg),
            "chat": asdict(assembly.chat_cfg),
            "chat_mode": assembly.chat_mode,
        }
    )


def save_checkpoint(params: dict, path, config_digest: bytes = b"\x00" * 32) -> None:
    if len(config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(config_digest)
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else params[name]
            code = _DTYPE_TO_CODE.get(np.dtype(data.dtype))
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {data.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    """Parse a checkpoint file into {'digest': bytes, 'tensors': {name: array}}."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {off}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32, "config digest")
    tensors: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _CODE_TO_DTYPE:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = _CODE_TO_DTYPE[code]
        count = int(np.prod(dims)) if rank else 1
        raw = take(count * dtype.itemsize, f"data of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return {"digest": digest, "tensors": tensors}


def load_checkpoint(
    path,
    params: Optional[dict] = None,
    config_digest: Optional[bytes] = None,
    force: bool = False,
    prefix: Optional[str] = None,
) -> dict:
    """Read a checkpoint; when params is given, copy values in by name.

    prefix restricts the transfer to names starting with it (stage
    transitions). Unknown names or shape mismatches are reported by tensor
    name; a digest mismatch is an error unless force is set.
    """
    loaded = read_checkpoint(path)
    if config_digest is not None and loaded["digest"] != config_digest and not force:
        raise CheckpointError(
            "config digest mismatch between checkpoint and current model (use force to override)"
        )
    if params is None:
        return loaded
    applied = []
    for name, arr in loaded["tensors"].items():
        if prefix is not None and not name.startswith(prefix):
            continue
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name!r} not present in the model")
        target = params[name]
        if tuple(target.data.shape) != tuple(arr.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint {arr.shape} vs model {target.data.shape}"
            )
        target.data = arr.astype(target.data.dtype)
        applied.append(name)
    loaded["applied"] = applied
    return loaded
