"""Little-endian record file shared by checkpoints and feature dumps.

Layout::

    b"PIEV"  u32 version  u64 step  32-byte sha256 of the config text
    u32 config length, UTF-8 config text (``key = value`` lines)
    u32 record count
    per record: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
                prod(dims) x f64 payload
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, IncompatibleCheckpointError

MAGIC = b"PIEV"
VERSION = 1


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    step: int = 0
    config_text: str = ""
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config_text)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Records under ``prefix/`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.records.items() if k.startswith(prefix + "/")}


def encode(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", version, ckpt.step), config_hash(ckpt.config_text),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.records))]
    for name, arr in ckpt.records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected_hash: bytes | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("not a PIEV file (bad magic)")
    version, step = r.unpack("<IQ", "header")
    if version != VERSION:
        raise IncompatibleCheckpointError(f"file format version {version}, this build reads {VERSION}")
    digest = r.take(32, "config hash")
    (n,) = r.unpack("<I", "config length")
    try:
        text = r.take(n, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError("config text is not UTF-8") from exc
    if config_hash(text) != digest:
        raise CorruptCheckpointError("config hash does not match the stored config text")
    if expected_hash is not None and expected_hash != digest:
        raise IncompatibleCheckpointError("checkpoint was written under a different config")
    (count,) = r.unpack("<I", "record count")
    records = {}
    for _ in range(count):
        (nl,) = r.unpack("<H", "name length")
        name = r.take(nl, "record name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        payload = r.take(8 * size, f"{name} payload")
        records[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return Checkpoint(step, text, records)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_hash)


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
