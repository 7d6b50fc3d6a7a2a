"""Flat binary checkpoints for parameter sets.

Layout: magic, 4-byte big-endian header length, JSON header (module name,
seed, per-entry name/shape/step count), then for each entry the value and
Adam moment arrays as little-endian float64 in row-major order.  Round-trips
are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..errors import UsageError
from .optim import Parameter, ParamDict

MAGIC = b"LSCP1\n"


def save_params(path, module: str, seed: int, groups: Dict[str, ParamDict]) -> None:
    """Write named parameter groups to `path`."""
    header = {
        "module": module,
        "seed": int(seed),
        "groups": [
            {
                "name": gname,
                "entries": [
                    {"name": pname, "shape": list(p.value.shape), "steps": p.steps}
                    for pname, p in sorted(group.items())
                ],
            }
            for gname, group in sorted(groups.items())
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(blob)))
        fh.write(blob)
        for _, group in sorted(groups.items()):
            for _, p in sorted(group.items()):
                for arr in (p.value, p.m, p.v):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> Tuple[str, int, Dict[str, ParamDict]]:
    """Read a checkpoint written by save_params."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise UsageError(f"{path} is not a checkpoint file")
    off = len(MAGIC)
    (hlen,) = struct.unpack(">I", raw[off:off + 4])
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    groups: Dict[str, ParamDict] = {}
    for gspec in header["groups"]:
        group: ParamDict = {}
        for espec in gspec["entries"]:
            shape = tuple(espec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays = []
            for _ in range(3):
                arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
                off += count * 8
                arrays.append(arr.reshape(shape).astype(np.float64))
            p = Parameter(arrays[0])
            p.m = arrays[1]
            p.v = arrays[2]
            p.steps = int(espec["steps"])
            group[espec["name"]] = p
        groups[gspec["name"]] = group
    if off != len(raw):
        raise UsageError(f"{path} has trailing bytes; checkpoint is corrupt")
    return header["module"], int(header["seed"]), groups
