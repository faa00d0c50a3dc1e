"""Versioned binary container for parameters and run metadata.

Layout (little-endian)::

    b"SQCV" | u32 version | u32 header_len | header JSON
    then per blob, in manifest order:
    u16 name_len | name | u8 ndim | u32 dims[ndim] | u8 dtype (0=f32, 1=f64) | raw data

The JSON header carries the manifest (name, shape, dtype per blob) plus free
metadata: config, vocabulary, step count and RNG state.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"SQCV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, detail: str = ""):
        super().__init__("truncated checkpoint" + (f": {detail}" if detail else ""))


class UnsupportedVersionError(CheckpointError):
    def __init__(self, version: int):
        super().__init__(f"unsupported version {version} (expected {VERSION})")
        self.version = version


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: Dict[str, np.ndarray]
    vocab: Optional[dict] = None
    step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return write_container(
            self.params,
            {
                "kind": self.kind,
                "config": self.config,
                "vocab": self.vocab,
                "step": self.step,
                "rng_state": self.rng_state,
                "meta": self.meta,
            },
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header, blobs = read_container(data)
        return cls(
            kind=header.get("kind", ""),
            config=header.get("config", {}),
            params=blobs,
            vocab=header.get("vocab"),
            step=int(header.get("step", 0)),
            rng_state=header.get("rng_state"),
            meta=header.get("meta", {}),
        )


def write_container(blobs: Dict[str, np.ndarray], header: dict, version: int = VERSION) -> bytes:
    names = sorted(blobs)
    manifest = []
    for n in names:
        arr = np.asarray(blobs[n])
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        manifest.append({"name": n, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    head = dict(header)
    head["manifest"] = manifest
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", version, len(head_bytes)))
    out.write(head_bytes)
    for n in names:
        arr = np.asarray(blobs[n])
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        nb = n.encode()
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(struct.pack("<B", code))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(data: bytes):
    r = _Reader(data)
    if len(data) < 4:
        raise TruncatedCheckpointError("missing magic bytes")
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    version, head_len = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(version)
    try:
        header = json.loads(r.take(head_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    blobs: Dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"blob {name!r}: unknown dtype code {code}")
        if name != entry["name"] or list(shape) != list(entry["shape"]) or str(_DTYPES[code].newbyteorder("=")) != entry["dtype"]:
            raise ShapeMismatchError(
                f"blob {name!r} {shape} does not match manifest entry {entry['name']!r} {tuple(entry['shape'])}"
            )
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * _DTYPES[code].itemsize)
        blobs[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).astype(_DTYPES[code].newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last blob")
    return header, blobs


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def check_shapes(params: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> None:
    """Raise ShapeMismatchError unless every expected name is present with its shape."""
    for name, shape in expected.items():
        if name not in params:
            raise ShapeMismatchError(f"checkpoint lacks parameter {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"parameter {name!r}: checkpoint has {tuple(params[name].shape)}, model expects {tuple(shape)}")
