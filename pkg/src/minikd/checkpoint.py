"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"KDCK"  u8 version  u64 total-length
    u8 n  kind tag (ascii)
    u32 n  layer spec (utf-8 json)
    u32 n  run record (utf-8 json: config hash, seed)
    u32 parameter count, then per parameter
        u16 n name  u8 ndim  u32 dims...  float32 data
    32-byte sha256 of every preceding byte

The total length sits in the header so a cut-off file is reported with the
expected and actual sizes rather than as a generic parse failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ModelGraph

MAGIC = b"KDCK"
VERSION = 1
_DIGEST = 32

__all__ = [
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "HashMismatchError",
    "TruncatedCheckpointError",
    "CheckpointInfo",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
]


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, expected: int, actual: int, path=""):
        self.expected = expected
        self.actual = actual
        super().__init__(f"checkpoint {path} truncated: expected {expected} bytes, found {actual}")


@dataclass(frozen=True)
class CheckpointInfo:
    kind: str
    config_hash: Optional[str]
    seed: object
    digest: str


def _encode(model: ModelGraph, config_hash: Optional[str], seed) -> bytes:
    kind = model.kind.encode("ascii")
    spec = model.spec_json().encode("utf-8")
    record = json.dumps({"config_hash": config_hash, "seed": seed}, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<B", len(kind)), kind, struct.pack("<I", len(spec)), spec]
    parts += [struct.pack("<I", len(record)), record, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    total = len(MAGIC) + 1 + 8 + len(body) + _DIGEST
    head = MAGIC + struct.pack("<BQ", VERSION, total)
    return head + body


def save_checkpoint(model: ModelGraph, path, *, config_hash: Optional[str] = None, seed=None) -> Path:
    """Write ``model`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    blob = _encode(model, config_hash, seed)
    blob += hashlib.sha256(blob).digest()
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint {self.path}: field at byte {self.pos} runs past the payload")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path, expected_config_hash: Optional[str] = None):
    """Return ``(model, CheckpointInfo)``; every integrity check raises its own error type."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 13:
        raise TruncatedCheckpointError(13, len(blob), path)
    version, total = struct.unpack_from("<BQ", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader understands {VERSION}")
    if len(blob) < total:
        raise TruncatedCheckpointError(total, len(blob), path)
    if len(blob) > total:
        raise CheckpointError(f"{path}: {len(blob) - total} trailing bytes after the declared length {total}")
    payload, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise HashMismatchError(f"{path}: content hash does not match the stored sha256")
    r = _Reader(payload, path)
    r.pos = 13
    (n,) = r.unpack("<B")
    kind = r.take(n).decode("ascii")
    (n,) = r.unpack("<I")
    spec = json.loads(r.take(n).decode("utf-8"))
    (n,) = r.unpack("<I")
    record = json.loads(r.take(n).decode("utf-8"))
    if spec.get("kind") != kind:
        raise CheckpointError(f"{path}: kind tag {kind!r} disagrees with layer spec {spec.get('kind')!r}")
    model = ModelGraph.from_spec(spec)
    (count,) = r.unpack("<I")
    if count != len(model.params):
        raise CheckpointError(f"{path}: {count} parameter tensors stored, graph declares {len(model.params)}")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if set(state) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the layer spec")
    model.load_state_dict(state)
    if expected_config_hash is not None and record.get("config_hash") != expected_config_hash:
        raise HashMismatchError(
            f"{path}: config hash {record.get('config_hash')} does not match expected {expected_config_hash}"
        )
    return model, CheckpointInfo(kind, record.get("config_hash"), record.get("seed"), digest.hex())


def load_checkpoint(path, expected_config_hash: Optional[str] = None) -> ModelGraph:
    return read_checkpoint(path, expected_config_hash)[0]
