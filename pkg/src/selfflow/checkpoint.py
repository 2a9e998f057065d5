"""Checkpoint files: u64 header length | JSON header | flat little-endian buffers.

Buffers follow ``header["param_order"]`` and are stored in four groups, in
order: student, teacher, Adam first moments, Adam second moments. The
default dtype is f64 so that a resumed run is bitwise identical to an
unbroken one; f32 files are smaller but only approximately resumable.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .objectives import TrainState

FORMAT_VERSION = 1
GROUPS = ("student", "teacher", "m", "v")
DTYPES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(ValueError):
    pass


def save(path, state: TrainState, config: dict, config_hash: str, seed: int, dtype: str = "f64") -> dict:
    if dtype not in DTYPES:
        raise ValueError(f"unknown checkpoint dtype {dtype!r}")
    order = list(state.student)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash,
        "step": int(state.step),
        "rng": {"seed": int(seed), "step": int(state.step)},
        "dtype": dtype,
        "param_order": order,
        "shapes": {k: list(state.student[k].shape) for k in order},
    }
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    code = DTYPES[dtype]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(h)))
        f.write(h)
        for group in GROUPS:
            tree = getattr(state, group)
            for k in order:
                f.write(np.ascontiguousarray(tree[k], dtype=code).tobytes())
    # atomic replace so a crash never leaves a half-written checkpoint
    os.replace(tmp, path)
    return header


def read_header(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read(8)
        if len(raw) < 8:
            raise CheckpointError(f"{path}: truncated checkpoint")
        (n,) = struct.unpack("<Q", raw)
        body = f.read(n)
    if len(body) < n:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(body)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header


def load(path) -> tuple[dict, TrainState]:
    header = read_header(path)
    blob = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    offset = 8 + n
    code = DTYPES[header["dtype"]]
    itemsize = np.dtype(code).itemsize
    order, shapes = header["param_order"], header["shapes"]
    per_group = sum(int(np.prod(shapes[k])) for k in order)
    need = offset + len(GROUPS) * per_group * itemsize
    if len(blob) != need:
        raise CheckpointError(f"{path}: payload is {len(blob) - offset} bytes, expected {need - offset}")
    trees = {}
    for group in GROUPS:
        tree = {}
        for k in order:
            size = int(np.prod(shapes[k]))
            arr = np.frombuffer(blob, dtype=code, count=size, offset=offset)
            tree[k] = arr.astype(np.float64).reshape(shapes[k])
            offset += size * itemsize
        trees[group] = tree
    return header, TrainState(step=header["step"], **trees)
