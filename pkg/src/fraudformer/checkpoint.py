"""Versioned binary checkpoints.

Layout: magic "FFCK" | u32 version | u64 config-JSON length + bytes |
u64 manifest-JSON length + bytes | little-endian float32 parameter blobs
in manifest order | u32 CRC32 of everything before it.

Each named tensor is stored exactly once; the embedding tables double as
decode matrices structurally, so tying survives a round trip by
construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .model import ModelConfig
from .numerics import Tensor
from .sft import AnomalyHeadConfig

__all__ = [
    "MAGIC", "VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "CrcError", "VersionError", "ShapeError",
]

MAGIC = b"FFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CrcError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, Tensor]
    model: ModelConfig
    head: Optional[AnomalyHeadConfig]
    kind: str            # pretrain | sft | contrastive
    meta: dict


def save_checkpoint(path, params: Dict[str, Tensor], model: ModelConfig,
                    head: Optional[AnomalyHeadConfig] = None,
                    kind: str = "pretrain", meta: Optional[dict] = None) -> None:
    config = {
        "model": model.to_json(),
        "head": head.to_json() if head is not None else None,
        "kind": kind,
        "meta": meta or {},
    }
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(params)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        blob = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    man_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<Q", len(cfg_bytes)), cfg_bytes,
        struct.pack("<Q", len(man_bytes)), man_bytes,
        *blobs,
    ])
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CrcError(f"{path}: CRC mismatch; file is corrupt")
    version = struct.unpack("<I", body[4:8])[0]
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    cfg_len = struct.unpack("<Q", body[pos:pos + 8])[0]
    pos += 8
    config = json.loads(body[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    man_len = struct.unpack("<Q", body[pos:pos + 8])[0]
    pos += 8
    manifest = json.loads(body[pos:pos + man_len].decode("utf-8"))
    pos += man_len
    data = body[pos:]
    params: Dict[str, Tensor] = {}
    for i, entry in enumerate(manifest):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        next_start = manifest[i + 1]["offset"] if i + 1 < len(manifest) else len(data)
        if end > len(data) or end != next_start:
            raise ShapeError(f"{path}: blob for {entry['name']!r} does not match shape {shape}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    model = ModelConfig.from_json(config["model"])
    head = AnomalyHeadConfig.from_json(config["head"]) if config["head"] else None
    return Checkpoint(params=params, model=model, head=head,
                      kind=config["kind"], meta=config.get("meta", {}))
