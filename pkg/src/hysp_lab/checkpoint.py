"""Binary checkpoint format.

Layout (little-endian)::

    magic "HYSP" | u16 version | u32 D | u32 V | u32 B | f64 curvature
    | 32-byte sha256 of the config | u32 epoch | u32 len + UTF-8 config JSON
    | u32 blob count | blobs

Each blob is ``u16 name length, name, u8 ndim, u32 dims..., f64 data``.
Parameters are stored as float64 so that a save/load cycle is lossless.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import LabConfig, config_hash, from_dict, to_dict
from .errors import CorruptCheckpoint
from .model import TwinModel

MAGIC = b"HYSP"
VERSION = 1
_HEAD = struct.Struct("<4sHIIId32sI")


@dataclass
class Checkpoint:
    twin: TwinModel
    config: LabConfig
    epoch: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    queue: np.ndarray | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    key = name.encode()
    head = struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    twin = ckpt.twin
    cfg_json = json.dumps(to_dict(ckpt.config), sort_keys=True).encode()
    blobs = [(f"online/{k}", v) for k, v in twin.online.items()]
    blobs += [(f"target/{k}", v) for k, v in twin.target.items()]
    blobs += [(f"momentum/{k}", v) for k, v in ckpt.momentum.items()]
    if ckpt.queue is not None:
        blobs.append(("queue", ckpt.queue))
    out = [
        _HEAD.pack(MAGIC, VERSION, twin.config.embed_dim, twin.graph.num_joints, twin.config.blocks,
                   float(ckpt.config.train.curvature), bytes.fromhex(ckpt.config_hash), ckpt.epoch),
        struct.pack("<I", len(cfg_json)), cfg_json, struct.pack("<I", len(blobs)),
    ]
    out += [_blob(name, arr) for name, arr in blobs]
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise CorruptCheckpoint(f"{self.path}: truncated at byte {self.off}")
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CorruptCheckpoint(f"{self.path}: truncated at byte {self.off}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    """Decode a checkpoint; a config-hash mismatch only warns."""
    from .trainer import build_twin

    r = _Reader(Path(path).read_bytes(), path)
    magic, version, dim, joints, blocks, curvature, digest, epoch = r.take(_HEAD.format)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    (n,) = r.take("<I")
    try:
        cfg = from_dict(json.loads(r.bytes(n).decode()))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable config block ({exc})") from None
    if config_hash(cfg) != digest.hex():
        warnings.warn(f"{path}: embedded config does not match header hash", stacklevel=2)
    if expected_hash is not None and expected_hash != digest.hex():
        warnings.warn(f"{path}: checkpoint config hash differs from the requested config", stacklevel=2)
    twin = build_twin(cfg, rng=None)
    if (twin.config.embed_dim, twin.graph.num_joints, twin.config.blocks) != (dim, joints, blocks):
        raise CorruptCheckpoint(f"{path}: header dimensions disagree with the embedded config")
    (count,) = r.take("<I")
    online, target, momentum, queue = {}, {}, {}, None
    for _ in range(count):
        (klen,) = r.take("<H")
        name = r.bytes(klen).decode()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(r.bytes(size), dtype="<f8").reshape(shape).astype(np.float64)
        group, _, key = name.partition("/")
        if group == "online":
            online[key] = arr
        elif group == "target":
            target[key] = arr
        elif group == "momentum":
            momentum[key] = arr
        elif name == "queue":
            queue = arr
        else:
            raise CorruptCheckpoint(f"{path}: unknown blob {name!r}")
    if r.off != len(r.raw):
        raise CorruptCheckpoint(f"{path}: trailing bytes after last blob")
    twin.online, twin.target = online, target
    return Checkpoint(twin, cfg, epoch, momentum, queue)
