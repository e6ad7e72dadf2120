"""Binary checkpoint format.

Layout: magic ``b"EYWK"``, version (u32 LE), header length (u32 LE), UTF-8
JSON header whose ``shapes`` table maps array names to dims in storage order,
then every array as little-endian float32 in that order. The header also
carries the step counter, model / train configs and curriculum metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EYWK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict, header: dict) -> None:
    names = list(arrays)
    data = {n: np.ascontiguousarray(np.asarray(arrays[n].cpu() if hasattr(arrays[n], "cpu") else arrays[n],
                                               dtype="<f4")) for n in names}
    head = dict(header)
    head["shapes"] = {n: list(data[n].shape) for n in names}
    head["order"] = names
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(data[n].tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, n = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    off = 12 + n
    arrays = {}
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, header
