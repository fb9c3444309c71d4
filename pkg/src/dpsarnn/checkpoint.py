"""Flat binary checkpoint format.

Layout (all integers little-endian uint32):

    magic   4 bytes  b"DPSA"
    version uint32   currently 1
    clen    uint32   length of the UTF-8 JSON config record
    config  clen bytes
    nparams uint32
    then per parameter, in writer order:
        nlen   uint32, name bytes (UTF-8)
        rank   uint32, rank × uint32 dims
        data   prod(dims) little-endian float32

Round-trips float32 parameters bit-exactly.
"""

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"DPSA"
VERSION = 1

_U32 = struct.Struct("<I")


def save_checkpoint(path, config, named_params):
    """Write config (JSON-serializable dict) and (name, array) pairs."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(VERSION))
        f.write(_U32.pack(len(blob)))
        f.write(blob)
        items = list(named_params)
        f.write(_U32.pack(len(items)))
        for name, param in items:
            arr = np.asarray(param.data if hasattr(param, "data") else param)
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode()
            f.write(_U32.pack(len(enc)))
            f.write(enc)
            f.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                f.write(_U32.pack(d))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config dict, ordered {name: float32 array})."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32(what):
        return _U32.unpack(take(4, what))[0]

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    clen = u32("config length")
    try:
        config = json.loads(bytes(take(clen, "config")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config record: {e}") from e
    params = {}
    for _ in range(u32("parameter count")):
        nlen = u32("name length")
        name = bytes(take(nlen, "name")).decode()
        rank = u32("rank")
        shape = tuple(u32("dim") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4")
        params[name] = data.reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last parameter")
    return config, params
