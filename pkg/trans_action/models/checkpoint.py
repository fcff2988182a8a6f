"""
Checkpoint container.

Layout, all integers little-endian:

    magic        4 bytes  b"TACP"
    version      u16
    n_fields     u16
    per field:   u16 name length, UTF-8 name, i64 value      (ModelConfig; variant as its index)
    n_tensors    u32
    per tensor:  u16 name length, UTF-8 name, u8 ndim, u32 extent per axis,
                 float32 payload (IEEE-754, row-major)
    checksum     u64      first 8 bytes of BLAKE2b over every preceding byte

Tensors whose names start with `state.` carry training state (optimizer
velocities, epoch counter) rather than model parameters.
"""

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from trans_action.exceptions import DataError
from trans_action.logger import logger
from trans_action.models.tensor import get_dtype
from trans_action.models.transaction import VARIANTS, ModelConfig, ModelParams, init_params

MAGIC = b"TACP"
VERSION = 1
STATE_PREFIX = "state."
CONFIG_FIELDS = tuple(ModelConfig.model_fields)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    state: Dict[str, np.ndarray] = field(default_factory=dict)


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _pack_name(name: str) -> bytes:
    encoded = name.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


def encode_checkpoint(cfg: ModelConfig, params: ModelParams, state: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    chunks = [MAGIC, struct.pack("<HH", VERSION, len(CONFIG_FIELDS))]
    for name in CONFIG_FIELDS:
        value = getattr(cfg, name)
        if name == "variant":
            value = VARIANTS.index(value)
        chunks.append(_pack_name(name) + struct.pack("<q", value))

    tensors = [(name, t.data) for name, t in params.named_parameters()]
    tensors += [(STATE_PREFIX + name, np.asarray(a)) for name, a in sorted((state or {}).items())]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        chunks.append(_pack_name(name))
        chunks.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())

    payload = b"".join(chunks)
    return payload + struct.pack("<Q", _checksum(payload))


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.payload):
            raise DataError(f"{self.source}: truncated {what} at byte offset {self.offset}: "
                            f"expected {n} bytes, found {len(self.payload) - self.offset}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self) -> str:
        (length,) = self.unpack("<H", "name length")
        return self.take(length, "name").decode("utf-8")


def decode_checkpoint(blob: bytes, source: str = "checkpoint") -> Checkpoint:
    if len(blob) < 8 + len(MAGIC):
        raise DataError(f"{source}: file too short ({len(blob)} bytes)")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise DataError(f"{source}: checksum mismatch, file is corrupt")

    reader = _Reader(payload, source)
    if reader.take(4, "magic") != MAGIC:
        raise DataError(f"{source}: bad magic at byte offset 0, not a checkpoint")
    version, n_fields = reader.unpack("<HH", "header")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")

    values = {}
    for _ in range(n_fields):
        name = reader.name()
        (values[name],) = reader.unpack("<q", f"config field '{name}'")
    if "variant" in values:
        values["variant"] = VARIANTS[values["variant"]]
    try:
        cfg = ModelConfig(**values)
    except ValueError as e:
        raise DataError(f"{source}: invalid model config in header: {e}") from e

    arrays = {}
    (n_tensors,) = reader.unpack("<I", "tensor count")
    for _ in range(n_tensors):
        name = reader.name()
        (ndim,) = reader.unpack("<B", f"rank of '{name}'")
        shape = reader.unpack(f"<{ndim}I", f"shape of '{name}'")
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * count, f"payload of '{name}'")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if reader.offset != len(payload):
        raise DataError(f"{source}: {len(payload) - reader.offset} unexpected bytes at offset {reader.offset}")

    params = init_params(cfg)
    for name, t in params.named_parameters():
        if name not in arrays:
            raise DataError(f"{source}: missing parameter '{name}'")
        data = arrays.pop(name)
        if data.shape != t.shape:
            raise DataError(f"{source}: parameter '{name}' has shape {data.shape}, config implies {t.shape}")
        t.data = data.astype(get_dtype())

    state = {}
    for name, data in arrays.items():
        if not name.startswith(STATE_PREFIX):
            raise DataError(f"{source}: unexpected tensor '{name}'")
        state[name[len(STATE_PREFIX):]] = data.astype(get_dtype())
    return Checkpoint(cfg, params, state)


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, state: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(cfg, params, state))
    logger.info(f"Saved checkpoint {path} ({params.parameter_count()} parameters)")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info(f"Loaded checkpoint {path} (variant={checkpoint.config.variant})")
    return checkpoint
