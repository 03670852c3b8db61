"""Binary checkpoint format.

Little-endian layout::

    b"TFMN" | u32 version | u32 len + UTF-8 config text (key=value lines)
    | u32 tensor count | per tensor: u16 len + UTF-8 name, u8 rank,
    rank x u64 dims, float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .net import TFMAN, TfmanConfig, build

MAGIC = b"TFMN"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def encode(model: TFMAN) -> bytes:
    cfg = model.cfg.to_text().encode("utf-8")
    named = sorted(model.named_parameters(), key=lambda kv: kv[0])
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, p in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TFMAN, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def decode(buf: bytes) -> tuple[TfmanConfig, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a TFMAN checkpoint (bad magic)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    (cfg_len,) = r.unpack("I")
    cfg = TfmanConfig.from_text(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return cfg, tensors


def load_checkpoint(path: str | Path) -> TFMAN:
    cfg, tensors = decode(Path(path).read_bytes())
    model = build(cfg)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"parameter names do not match the config: {missing[:5]}")
    for name, p in params.items():
        if p.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape} != {p.shape}")
        p.data = tensors[name].copy()
    return model
