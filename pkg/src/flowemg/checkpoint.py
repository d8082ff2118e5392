"""Binary checkpoint container (magic ``FMCK``).

Layout, all little-endian::

    b"FMCK" | version u32 | n_params u32 | records...      # model weights
            | n_ema u32   | records...                      # EMA weights (may be 0)
            | header_len u32 | UTF-8 ``key=value`` lines    # model config

    record: name_len u16 | name | rank u8 | extents u32 * rank | float32 data
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_group(params: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode(params: dict[str, np.ndarray], ema: dict[str, np.ndarray] | None = None,
           header: dict[str, str] | None = None) -> bytes:
    body = [MAGIC, struct.pack("<I", VERSION), _pack_group(params), _pack_group(ema or {})]
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    body.append(struct.pack("<I", len(text)) + text)
    return b"".join(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_group(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def decode(buf: bytes):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = _read_group(r)
    ema = _read_group(r)
    (hlen,) = r.unpack("<I")
    header = {}
    for line in r.take(hlen).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    return params, ema, header


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params, ema=None, header=None) -> None:
    atomic_write_bytes(path, encode(params, ema, header))


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
