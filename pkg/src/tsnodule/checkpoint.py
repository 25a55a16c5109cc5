"""Single-file tensor checkpoints.

Layout (little-endian)::

    b"NCKP" | u32 version=1 | u64 manifest_len | manifest (UTF-8 JSON) | blob

The manifest lists ``{name, shape, dtype, offset, length}`` for every tensor
(offsets relative to the blob start), a ``config`` echo, ``metadata`` and a
``digest`` of the blob (``sha256:<hex>``). Tensors are stored as f32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, DigestMismatchError, FormatError, OverlappingOffsetsError, ShapeMismatchError,
                     TruncatedPayloadError, UnsupportedVersionError)

MAGIC = b"NCKP"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class CheckpointFile:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    digest: str = ""


@dataclass
class LoadReport:
    loaded: list[str]
    missing: list[str]
    unexpected: list[str]

    @property
    def complete(self) -> bool:
        return not self.missing


def _digest(blob: bytes) -> str:
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def encode_checkpoint(tensors: dict, config: dict | None = None, metadata: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to save non-finite tensor {name}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"tensors": entries, "config": config or {}, "metadata": metadata or {}, "digest": _digest(blob)}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + blob


def save_checkpoint(path, tensors: dict, config: dict | None = None, metadata: dict | None = None) -> str:
    """Write a checkpoint and return its blob digest."""
    data = encode_checkpoint(tensors, config, metadata)
    Path(path).write_bytes(data)
    return read_manifest_bytes(data)[0]["digest"]


def read_manifest_bytes(data: bytes):
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("checkpoint shorter than its header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    end = _HEADER.size + mlen
    if len(data) < end:
        raise TruncatedPayloadError("checkpoint manifest truncated")
    try:
        manifest = json.loads(data[_HEADER.size:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc
    return manifest, data[end:]


def decode_checkpoint(data: bytes) -> CheckpointFile:
    manifest, blob = read_manifest_bytes(data)
    entries = sorted(manifest["tensors"], key=lambda e: e["offset"])
    prev_end = 0
    for e in entries:
        if e["offset"] < prev_end:
            raise OverlappingOffsetsError(f"tensor {e['name']} overlaps the previous payload")
        if e["dtype"] != "f32" or e["length"] != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise FormatError(f"tensor {e['name']}: length does not match shape and dtype")
        prev_end = e["offset"] + e["length"]
    if prev_end > len(blob):
        raise TruncatedPayloadError(f"checkpoint blob has {len(blob)} bytes, manifest needs {prev_end}")
    if _digest(blob) != manifest["digest"]:
        raise DigestMismatchError("checkpoint payload does not match its digest")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["length"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
    if len(tensors) != len(manifest["tensors"]):
        raise FormatError("duplicate tensor names in checkpoint manifest")
    return CheckpointFile(tensors, manifest.get("config", {}), manifest.get("metadata", {}), manifest["digest"])


def load_checkpoint(path) -> CheckpointFile:
    return decode_checkpoint(Path(path).read_bytes())


def inspect_checkpoint(path) -> dict:
    return read_manifest_bytes(Path(path).read_bytes())[0]


def load_parameters(params: dict, checkpoint, strict: bool = True) -> LoadReport:
    """Copy checkpoint tensors into ``params`` in place (arrays keep their identity).

    Every name present in both must agree in shape. ``strict`` additionally
    requires the checkpoint to cover every name in ``params``.
    """
    ckpt = checkpoint if isinstance(checkpoint, CheckpointFile) else load_checkpoint(checkpoint)
    mismatched = [(n, params[n].shape, t.shape) for n, t in ckpt.tensors.items()
                  if n in params and params[n].shape != t.shape]
    if mismatched:
        name, want, got = mismatched[0]
        detail = "; ".join(f"{n}: model {tuple(a)} vs checkpoint {tuple(b)}" for n, a, b in mismatched)
        err = ShapeMismatchError(name, want, got)
        err.args = (f"shape mismatch: {detail}",)
        raise err
    missing = [n for n in params if n not in ckpt.tensors]
    if strict and missing:
        raise KeyError(f"checkpoint does not cover {len(missing)} parameters, e.g. {missing[:5]}")
    loaded = []
    for name, arr in params.items():
        if name in ckpt.tensors:
            np.copyto(arr, ckpt.tensors[name], casting="same_kind")
            loaded.append(name)
    unexpected = [n for n in ckpt.tensors if n not in params]
    return LoadReport(loaded, missing, unexpected)
