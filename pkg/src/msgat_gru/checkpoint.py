"""Self-describing binary checkpoint: header, config block, named float64 arrays.

Layout (little-endian)::

    magic       8 bytes   b"MSGATCK\\0"
    version     u32
    hash        64 bytes  hex sha256 of the model config
    config_len  u32, then that many bytes of ``key=value`` lines (JSON values)
    n_arrays    u32
    per array:  u16 name_len, name, u8 ndim, ndim x u64 shape, float64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MissingArtifactError
from .model import ModelConfig, ModelParams, params_from_arrays, params_to_arrays

MAGIC = b"MSGATCK\0"
VERSION = 1


def config_text(config: ModelConfig) -> str:
    return "".join(f"{k}={json.dumps(v)}\n" for k, v in sorted(config.to_dict().items()))


def parse_config_text(text: str) -> ModelConfig:
    data = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad config line {line!r}")
        data[key] = json.loads(value)
    return ModelConfig.from_dict(data)


def encode(config: ModelConfig, params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), config.config_hash().encode("ascii")]
    text = config_text(config).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text]
    arrays = params_to_arrays(params)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def decode(blob: bytes) -> tuple[ModelConfig, ModelParams]:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = r.take(64).decode("ascii", errors="replace")
    config = parse_config_text(r.take(r.unpack("<I")).decode("utf-8"))
    if config.config_hash() != stored_hash:
        raise CheckpointError("config hash mismatch; checkpoint header is corrupt")
    arrays = {}
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode("utf-8")
        shape = tuple(r.unpack("<Q") for _ in range(r.unpack("<B")))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last array")
    return config, params_from_arrays(config, arrays)


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    Path(path).write_bytes(encode(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"checkpoint not found: {p}")
    return decode(p.read_bytes())
