"""Binary checkpoint format.

Layout (little-endian)::

    b"TTTSE1"
    u32 header length, header (UTF-8 JSON, sorted keys: topology + metadata)
    u32 leaf count
    per leaf: u16 name length, name, u8 ndim, u32 dims..., float32 data
    u8 optimizer flag; if set: u64 step, then float32 m and v per leaf
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import ModelDims, YModel

MAGIC = b"TTTSE1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: YModel
    metadata: dict = field(default_factory=dict)
    optimizer: dict | None = None

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(self.model, path, self.metadata, self.optimizer)


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode(model: YModel, metadata: dict | None = None, optimizer: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps({"topology": model.topology(), "metadata": metadata or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        _write_array(buf, t.data)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        if len(optimizer["m"]) != len(params):
            raise CheckpointError("optimizer state does not match the parameter list")
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", int(optimizer["t"])))
        for m, v in zip(optimizer["m"], optimizer["v"]):
            _write_array(buf, m)
            _write_array(buf, v)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: YModel, path: str | os.PathLike, metadata: dict | None = None,
                    optimizer: dict | None = None) -> None:
    data = encode(model, metadata, optimizer)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)


def decode(data: bytes, expect_task: str | None = None) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise CheckpointError("not a TTTSE1 checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file corrupt)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    topo = header["topology"]
    if expect_task is not None and topo["task"] != expect_task:
        raise CheckpointError(f"checkpoint holds a {topo['task']!r} model, expected {expect_task!r}")
    dims = ModelDims(topo["n_bins"], topo["hidden"], topo["context"])
    model = YModel(topo["task"], dims)
    if model.topology() != topo:
        raise CheckpointError(f"unsupported topology {topo}")
    (count,) = r.unpack("<I")
    if count != len(model.registry):
        raise CheckpointError(f"checkpoint has {count} leaves, model expects {len(model.registry)}")
    shapes = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        param = model.registry.get(name)
        if param is None or param.tensor.shape != tuple(shape):
            raise CheckpointError(f"leaf {name} {shape} does not fit the model")
        param.tensor.data[...] = r.array(shape)
        shapes.append(shape)
    (flag,) = r.unpack("<B")
    optimizer = None
    if flag:
        (t,) = r.unpack("<Q")
        m, v = [], []
        for shape in shapes:
            m.append(r.array(shape))
            v.append(r.array(shape))
        optimizer = {"t": t, "m": m, "v": v}
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(model, header.get("metadata", {}), optimizer)


def load_checkpoint(path: str | os.PathLike, expect_task: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data, expect_task)
