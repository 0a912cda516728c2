"""Versioned binary checkpoints.

Layout (little endian)::

    magic      8 bytes  b"DCSEPCKP"
    version    u32
    config     u32 length + UTF-8 JSON
    n_tensors  u32
    per tensor u16 name length, name, u8 ndim, u64 dims..., raw float64 data
    crc32      u32 over everything above

Tensor names are namespaced: ``param/<name>``, ``opt/<name>`` and
``extra/<name>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import ParameterSet
from .optim import RMSprop

MAGIC = b"DCSEPCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, params: ParameterSet, optimizer: RMSprop | None = None,
                    config: dict | None = None, extra: dict | None = None) -> None:
    meta = {"config": config or {}, "param_version": params.version}
    tensors = [(f"param/{k}", v) for k, v in params.items()]
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optimizer"] = {k: state[k] for k in ("rho", "eps", "base_lr", "epoch")}
        tensors += [(f"opt/{k}", v) for k, v in state["r"].items()]
    tensors += [(f"extra/{k}", np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(name, arr) for name, arr in tensors]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Returns ``(params, optimizer_or_None, config, extra)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    (version,) = struct.unpack_from("<I", body, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n_meta,) = struct.unpack_from("<I", body, 12)
    pos = 16
    meta = json.loads(body[pos : pos + n_meta].decode("utf-8"))
    pos += n_meta
    (n_tensors,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = ParameterSet()
    opt_r = {}
    extra = {}
    for _ in range(n_tensors):
        (n_name,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        group, _, key = name.partition("/")
        {"param": params, "opt": opt_r, "extra": extra}[group][key] = arr
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    params.version = meta.get("param_version", 0)
    optimizer = None
    if "optimizer" in meta:
        optimizer = RMSprop.from_state({**meta["optimizer"], "r": opt_r})
    return params, optimizer, meta["config"], extra
