"""HPMK checkpoint files.

Layout (little-endian)::

    b"HPMK" | u32 version
    u32 length | config text (utf-8, `key = value` lines)
    u32 length | meta JSON (epoch, step, counters, RNG states)
    u32 record count
    per record: u16 name length | name | u8 dtype (0=f32, 1=f64) | u8 ndim | u32 dims... | raw data
    u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HPMK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    student: "OrderedDict[str, np.ndarray]"
    teacher: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]"
    adam_v: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def _groups(ckpt: Checkpoint):
    return (("student", ckpt.student), ("teacher", ckpt.teacher), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v))


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    out += MAGIC + struct.pack("<I", ckpt.version)
    for text in (ckpt.config_text, json.dumps(ckpt.meta, sort_keys=True)):
        blob = text.encode("utf-8")
        out += struct.pack("<I", len(blob)) + blob
    records = [(f"{g}/{k}", v) for g, d in _groups(ckpt) for k, v in d.items()]
    out += struct.pack("<I", len(records))
    for name, arr in records:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not an HPMK checkpoint")
    body, footer = raw[:-4], raw[-4:]
    (crc,) = struct.unpack("<I", footer)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC32 mismatch (truncated or corrupted file)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads version {VERSION}")
    pos = 8
    texts = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        texts.append(body[pos:pos + n].decode("utf-8"))
        pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    groups: dict[str, OrderedDict] = {g: OrderedDict() for g in ("student", "teacher", "adam_m", "adam_v")}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape)
        pos += size
        group, key = name.split("/", 1)
        groups[group][key] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    return Checkpoint(texts[0], groups["student"], groups["teacher"], groups["adam_m"], groups["adam_v"],
                      json.loads(texts[1]), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
