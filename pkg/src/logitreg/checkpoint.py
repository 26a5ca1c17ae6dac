"""Binary checkpoints with a fixed little-endian layout.

Layout, all integers unsigned little-endian::

    magic        8 bytes   b"LOGITREG"
    version      u32
    fingerprint  16 bytes  ASCII hex of the model config hash
    config_len   u32, then that many bytes of UTF-8 JSON (the ModelConfig)
    step         u64       training-step counter
    n_tensors    u32
    per tensor:
        name_len u16, name (UTF-8), rank u8, dims u32 * rank,
        payload  float64 little-endian, C order

Loading checks the magic, the version, that the stored fingerprint matches the
stored config, and (when given) the caller's expected config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelConfig, ModelParams

MAGIC = b"LOGITREG"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    step: int
    version: int = VERSION


def encode_checkpoint(params: ModelParams, step: int = 0) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    fp = params.fingerprint.encode("ascii")
    if len(fp) != 16:
        raise CheckpointError("fingerprint must be 16 characters")
    parts = [MAGIC, struct.pack("<I", VERSION), fp, struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<QI", int(step), len(params.arrays)))
    for name, arr in params.arrays.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
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
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    fingerprint = r.take(16).decode("ascii")
    (cfg_len,) = r.unpack("<I")
    cfg_bytes = r.take(cfg_len)
    try:
        raw_cfg = json.loads(cfg_bytes)
        config = ModelConfig(raw_cfg["kind"], tuple(raw_cfg["input_shape"]), raw_cfg["num_classes"], tuple(raw_cfg["widths"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt model config: {exc}") from exc
    if config.fingerprint() != fingerprint:
        raise CheckpointError("fingerprint does not match the stored model config")
    if expected is not None and expected.fingerprint() != fingerprint:
        raise CheckpointError(f"fingerprint mismatch: checkpoint {fingerprint}, expected {expected.fingerprint()}")
    step, count = r.unpack("<QI")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    try:
        params = ModelParams(config, arrays, fingerprint)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return Checkpoint(params, step, version)


def save_checkpoint(params: ModelParams, path, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, step))
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)
