"""Binary checkpoint container for a :class:`ModelState`.

Layout (little-endian)::

    b"CPRM"  u32 version
    u32 d_in, d_model, n_blocks, n_heads, n_clusters, mlp_ratio,
        aggregator, n_classes, attn_hidden
    f64 dropout_p
    u32 record count
    per record: u32 name length, name (utf-8), u32 rank, u32 dims[rank],
                float32 values (row-major)
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .model import CaprmilConfig, ModelState, parameter_shapes
from .numerics.tensor import Tensor

MAGIC = b"CPRM"
VERSION = 1
_INT_FIELDS = ("d_in", "d_model", "n_blocks", "n_heads", "n_clusters", "mlp_ratio",
               "aggregator", "n_classes", "attn_hidden")
_HEADER = struct.Struct("<4sI" + "I" * len(_INT_FIELDS) + "dI")


def encode(state: ModelState) -> bytes:
    c = state.config
    ints = [int(getattr(c, f)) for f in _INT_FIELDS]
    parts = [_HEADER.pack(MAGIC, VERSION, *ints, float(c.dropout_p), len(state.params))]
    for name, t in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"checkpoint truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes, dtype=np.float32) -> ModelState:
    r = _Reader(buf)
    head = r.take(_HEADER.size, "header")
    magic, version, *rest = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    ints = dict(zip(_INT_FIELDS, rest[: len(_INT_FIELDS)]))
    dropout_p, count = rest[len(_INT_FIELDS)], rest[len(_INT_FIELDS) + 1]
    # every record holds at least a length, one name byte and a rank
    if count * 9 > len(buf) - r.pos:
        raise CorruptionError(f"header announces {count} records but only {len(buf) - r.pos} bytes follow", len(buf))
    if ints["n_blocks"] * 20 > count:
        raise FormatError(f"{count} records cannot hold {ints['n_blocks']} blocks")
    try:
        config = CaprmilConfig(**ints, dropout_p=dropout_p)
    except ValueError as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from exc
    expected = parameter_shapes(config)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"parameter name at byte {r.pos} is not valid utf-8") from None
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = math.prod(dims)
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims).copy()
        if expected.get(name) != tuple(dims):
            raise FormatError(f"unexpected parameter {name} with shape {tuple(dims)}")
        params[name] = Tensor(values, requires_grad=True, dtype=dtype, name=name)
    if list(params) != list(expected):
        missing = sorted(set(expected) - set(params))
        raise FormatError(f"checkpoint parameter set does not match config (missing {missing})")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return ModelState(config, params)


def save(state: ModelState, path) -> None:
    Path(path).write_bytes(encode(state))


def load(path, dtype=np.float32) -> ModelState:
    return decode(Path(path).read_bytes(), dtype=dtype)
