"""Checkpoint file format.

Layout::

    b"FSLCKPT1"
    uint32 LE   manifest length in bytes
    manifest    UTF-8 JSON, sorted keys; "tensors" lists [name, shape] in buffer order
    buffers     raw little-endian float32, concatenated in manifest order
    32 bytes    SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..models.model import FewShotModel, model_from_description

MAGIC = b"FSLCKPT1"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class ModelCheckpoint:
    manifest: dict
    weights: dict[str, np.ndarray]

    def build_model(self) -> FewShotModel:
        model = model_from_description(self.manifest["model"], seed=self.manifest.get("seed", 0))
        model.load_state_dict(self.weights)
        model.eval()
        return model


def snapshot(model: FewShotModel, manifest: dict) -> ModelCheckpoint:
    m = dict(manifest)
    m["model"] = model.describe()
    m["format_version"] = FORMAT_VERSION
    return ModelCheckpoint(m, {k: v.astype(np.float32) for k, v in model.state_dict().items()})


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    manifest = dict(ckpt.manifest)
    manifest["tensors"] = [[n, list(a.shape)] for n, a in ckpt.weights.items()]
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(mbytes)) + mbytes
    body += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.weights.values())
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> ModelCheckpoint:
    if len(blob) < len(MAGIC) + 4 + _DIGEST:
        raise CheckpointError("checkpoint checksum mismatch: file too short (truncated?)")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (mlen,) = struct.unpack("<I", body[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    manifest = json.loads(body[start: start + mlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    off = start + mlen
    weights = {}
    for name, shape in manifest.pop("tensors"):
        n = int(np.prod(shape)) * 4
        if off + n > len(body):
            raise CheckpointError(f"checkpoint buffer for {name} runs past end of file")
        weights[name] = np.frombuffer(body[off: off + n], dtype="<f4").reshape(shape).astype(np.float32)
        off += n
    if off != len(body):
        raise CheckpointError("checkpoint has trailing bytes after the declared buffers")
    return ModelCheckpoint(manifest, weights)


def save_checkpoint(model_or_ckpt, manifest: dict | None, path: str | Path) -> Path:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, ModelCheckpoint) else snapshot(model_or_ckpt, manifest or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
