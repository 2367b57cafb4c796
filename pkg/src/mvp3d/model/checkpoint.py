"""MVPC checkpoint files.

Layout (all integers little-endian)::

    b"MVPC"                  magic
    u32  version             (1)
    u32  config_len
    u8[config_len]           UTF-8 JSON config block
    u32  n_tensors
    n_tensors x {
        u32  name_len
        u8[name_len]         UTF-8 tensor name
        u8   dtype           0=f64, 1=f32, 2=i64
        u32  rank
        u64[rank]            dims
        payload              little-endian, C order
    }
    u32  crc32               of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"MVPC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, tensors: "dict[str, np.ndarray]") -> bytes:
    out = bytearray(MAGIC)
    cfg = json.dumps(config, sort_keys=True).encode()
    out += struct.pack("<II", VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        code = _CODES[arr.dtype]
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<BI", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an MVPC checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, clen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(take(clen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, tensors


def save_checkpoint(path, config: dict, tensors) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    tmp.replace(path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
