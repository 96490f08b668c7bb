"""Bit-exact binary checkpoints.

Layout (all integers little-endian uint32)::

    b"VITDD1\\0"
    len | config record (UTF-8 ``key=value`` lines)
    count
    per parameter, sorted by name:
        len | name (UTF-8) | rank | dims... | float64 LE data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ViTDDParams
from .tensor import Tensor

MAGIC = b"VITDD1\0"


def dumps(params, config):
    out = bytearray(MAGIC)
    record = config.to_record().encode("utf-8")
    out += struct.pack("<I", len(record)) + record
    names = sorted(params)
    out += struct.pack("<I", len(names))
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf, trainable=True):
    r = _Reader(bytes(buf))
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    n = r.u32("config length")
    try:
        config = ModelConfig.from_record(r.take(n, "config").decode("utf-8"))
    except UnicodeDecodeError:
        raise FormatError("config record is not UTF-8", r.pos - n) from None
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config record: {exc}", r.pos - n) from None
    params = ViTDDParams()
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count, name), dtype="<f8").reshape(dims)
        params[name] = Tensor(data, requires_grad=trainable)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last parameter", r.pos)
    params.validate(config)
    return params, config


def save_checkpoint(path, params, config):
    blob = dumps(params, config)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path, trainable=True):
    return loads(Path(path).read_bytes(), trainable=trainable)
