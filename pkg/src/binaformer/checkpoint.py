"""Single-file checkpoint format.

Layout (all integers little-endian uint32):

    magic b"BNFM" | format version | config-JSON length | config JSON
    entry count
    per entry: name length | name utf-8 | ndim | dims... | float32 data

Arrays are stored as little-endian float32 regardless of the runtime dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError

MAGIC = b"BNFM"
VERSION = 1


def save_checkpoint(path: Union[str, Path], config: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        arr = np.asarray(arr)
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    offset = 4
    version, = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    cfg_len, = struct.unpack_from("<I", raw, offset)
    offset += 4
    config = json.loads(raw[offset:offset + cfg_len].decode("utf-8"))
    offset += cfg_len
    count, = struct.unpack_from("<I", raw, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        ndim, = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        arrays[name] = data.reshape(shape).astype(float)
    return config, arrays
