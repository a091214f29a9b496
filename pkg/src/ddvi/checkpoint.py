"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DDVI1"
    u32 n, n bytes of UTF-8 text      # config echo, ``key = value`` lines
    repeated until end of file:
        u32 n, n bytes of UTF-8 name
        u32 rank, rank x u64 dims
        prod(dims) x f64 values (row-major)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DDVI1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict = field(default_factory=dict)


def format_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def parse_config(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"config line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def to_bytes(ckpt):
    parts = [MAGIC]
    text = format_config(ckpt.config).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text]
    for name, arr in ckpt.arrays.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def from_bytes(buf):
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    (n,) = struct.unpack("<I", take(4))
    config = parse_config(take(n).decode("utf-8"))
    arrays = {}
    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return Checkpoint(config, arrays)


def save(ckpt, path):
    """Atomic write: temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
