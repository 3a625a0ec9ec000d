"""Bit-exact checkpoint serialization (FSVAE1 format).

Layout, all little-endian:

    magic "FSVAE1"
    u32 tensor count
    per tensor (names sorted):
        u16 name length, name (utf-8)
        u8 dtype code (0 = f64)
        u8 rank
        u32 dims[rank]
        raw f64 data, C order
    u32 text length, text (utf-8): key=value lines, keys sorted

Tensors are stored as f64 regardless of in-memory dtype; float32 survives
the round trip bit-exactly. The text block carries the config snapshot,
optimizer scalars, and counters, so a checkpoint alone suffices to rebuild
the network and resume training.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FSVAE1"
_DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


def pack_checkpoint(tensors: dict[str, np.ndarray], text_fields: dict[str, str]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    for key, value in text_fields.items():
        if "\n" in key or "=" in key or "\n" in str(value):
            raise CheckpointError(f"text field {key!r} contains reserved characters")
    text = "".join(f"{k}={text_fields[k]}\n" for k in sorted(text_fields)).encode("utf-8")
    out.append(struct.pack("<I", len(text)))
    out.append(text)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_code, rank = r.unpack("<BB")
        if dtype_code != _DTYPE_F64:
            raise CheckpointError(f"unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n_elems = int(np.prod(dims)) if dims else 1
        raw = r.take(8 * n_elems)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    (text_len,) = r.unpack("<I")
    text = r.take(text_len).decode("utf-8")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            fields[key] = value
    return tensors, fields


def save_checkpoint(path, tensors: dict[str, np.ndarray], text_fields: dict[str, str]) -> None:
    with open(path, "wb") as f:
        f.write(pack_checkpoint(tensors, text_fields))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        return unpack_checkpoint(f.read())
