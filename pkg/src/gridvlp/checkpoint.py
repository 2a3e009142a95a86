"""Binary checkpoints.

Layout (all little-endian)::

    b"GVLP"  u32 version
    u32 len  JSON config snapshot
    u32 len  JSON metadata (step, rng state, optimizer scalars, extras)
    u32 count, then per tensor:
        u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 payload
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"GVLP"
VERSION = 1
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: Optional[dict[str, np.ndarray]] = None
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return _u32(len(raw)) + raw


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype != np.float32:
        raise CheckpointError(f"tensor {name!r} is {arr.dtype}; checkpoints store float32 only")
    enc = name.encode("utf-8")
    head = _u32(len(enc)) + enc + _u32(arr.ndim) + b"".join(_u32(d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    table = dict(ckpt.tensors)
    for name, arr in (ckpt.optimizer or {}).items():
        table[OPTIM_PREFIX + name] = arr
    parts = [MAGIC, _u32(VERSION), _blob(ckpt.config),
             _blob({**ckpt.meta, "has_optimizer": ckpt.optimizer is not None}),
             _u32(len(table))]
    parts += [_tensor_record(name, np.asarray(arr)) for name, arr in table.items()]
    body = b"".join(parts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + _u32(zlib.crc32(body)))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json(self):
        raw = self.take(self.u32())
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError(f"{self.path}: corrupt JSON block") from None


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint {p} not found")
    buf = p.read_bytes()
    r = _Reader(buf, p)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{p}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{p}: unsupported version {version} (expected {VERSION})")
    if len(buf) < 12:
        raise CheckpointError(f"{p}: truncated checkpoint")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointError(f"{p}: integrity check failed (checksum mismatch or truncation)")
    r.buf = buf[:-4]
    config = r.json()
    meta = r.json()
    tensors: dict[str, np.ndarray] = {}
    optim: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith(OPTIM_PREFIX):
            optim[name[len(OPTIM_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{p}: {len(r.buf) - r.pos} trailing bytes after tensor table")
    has_optim = meta.pop("has_optimizer", False)
    return Checkpoint(config, tensors, optim if has_optim else None, meta)
