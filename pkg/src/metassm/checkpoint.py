"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"MSSMCKPT"  magic
    u32          format version
    u64 n, n bytes   JSON manifest (UTF-8, sorted keys)
    u32          array count
    per array:   u32 name length, name bytes, u32 rank, rank x u64 dims,
                 prod(dims) x f64 payload

Arrays are written in sorted name order, so saving the same state twice
produces identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MSSMCKPT"
VERSION = 1


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    m = manifest_bytes(manifest)
    parts += [struct.pack("<Q", len(m)), m, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim)]
        parts += [struct.pack(f"<{a.ndim}Q", *a.shape), np.ascontiguousarray(a).tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (mlen,) = r.unpack("<Q")
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    return manifest, arrays


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_checkpoint(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(manifest, arrays))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def model_arrays(model, encoders=None) -> dict[str, np.ndarray]:
    tensors = dict(model.tensors())
    if encoders is not None:
        tensors.update(encoders.tensors())
    return {k: v.data for k, v in tensors.items()}


def save_checkpoint(path: str | Path, model, encoders=None, meta: dict | None = None) -> None:
    """Write model (and encoder) parameters with enough structure to rebuild them."""
    manifest = {"model": model.describe(), "meta": meta or {}}
    if encoders is not None:
        manifest["encoders"] = encoders.config.to_dict()
    write_checkpoint(path, manifest, model_arrays(model, encoders))


def load_checkpoint(path: str | Path):
    """Returns ``(model, encoders or None, manifest)``."""
    from .inference import EncoderConfig, Encoders
    from .ssm import GenerativeModel, assign_arrays

    manifest, arrays = read_checkpoint(path)
    try:
        model = GenerativeModel.from_description(manifest["model"], arrays)
        encoders = None
        if "encoders" in manifest:
            encoders = Encoders.create(model, EncoderConfig.from_dict(manifest["encoders"]),
                                       np.random.default_rng(0))
            assign_arrays(encoders.tensors(), arrays)
    except KeyError as exc:
        raise FormatError(f"checkpoint manifest lacks {exc}") from None
    return model, encoders, manifest
