"""Binary checkpoints.

Layout (all integers little-endian)::

    b"PICTCKPT"  u32 version
    u32 n + config text (utf-8)       64 ascii bytes: sha256 of the config text
    u32 epoch    u64 optimizer step
    u32 n + RNG state (json, sorted keys)
    u32 blob count, then per blob:
        u16 n + name   u8 ndim   u32 * ndim shape   float32 data

Blob names are prefixed ``student/``, ``teacher/``, ``image_head/``,
``adam_m/`` and ``adam_v/``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import LoadError

MAGIC = b"PICTCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    blobs: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text.encode()).hexdigest()

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_text(self.config_text)

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        p = prefix + "/"
        return OrderedDict((k[len(p):], v) for k, v in self.blobs.items() if k.startswith(p))

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", self.version)
        cfg = self.config_text.encode()
        out += struct.pack("<I", len(cfg)) + cfg
        out += self.config_hash.encode("ascii")
        out += struct.pack("<IQ", self.epoch, self.step)
        rng = json.dumps(self.rng_state, sort_keys=True).encode()
        out += struct.pack("<I", len(rng)) + rng
        out += struct.pack("<I", len(self.blobs))
        for name, arr in self.blobs.items():
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        try:
            return _parse(buf)
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise LoadError(f"corrupt checkpoint: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _parse(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError("truncated")
        b = buf[pos:pos + n]
        pos += n
        return b

    (version,) = take("<I")
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    config_text = take_bytes(n).decode()
    stored_hash = take_bytes(64).decode("ascii")
    epoch, step = take("<IQ")
    (n,) = take("<I")
    rng_state = json.loads(take_bytes(n).decode())
    (count,) = take("<I")
    blobs = OrderedDict()
    for _ in range(count):
        (n,) = take("<H")
        name = take_bytes(n).decode()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(take_bytes(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise ValueError("trailing bytes")
    ckpt = Checkpoint(config_text, blobs, epoch, step, rng_state, version)
    if ckpt.config_hash != stored_hash:
        raise LoadError("config hash does not match the embedded config text")
    return ckpt


def load(path, expected: RunConfig | str | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` (a config or its hash) must match if given."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = Checkpoint.from_bytes(buf)
    if expected is not None:
        want = expected.hash if isinstance(expected, RunConfig) else expected
        if want != ckpt.config_hash:
            raise LoadError(f"config hash mismatch: checkpoint {ckpt.config_hash[:12]}, expected {want[:12]}")
    return ckpt
