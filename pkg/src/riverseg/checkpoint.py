"""Checkpoint files: a JSON manifest of parameter names/shapes/dtypes plus a
flat little-endian binary blob in manifest order, in one file.

Layout: 8-byte magic, u32 little-endian manifest length, UTF-8 manifest JSON,
raw parameter bytes. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Module

_MAGIC = b"RSEGCKPT"


class CheckpointError(ValueError):
    pass


def _le_dtype(dtype: np.dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def save_checkpoint(path, named_params: list[tuple[str, np.ndarray]],
                    meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in named_params:
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": _le_dtype(arr.dtype)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    manifest = {"params": entries, "meta": meta or {}}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[list[tuple[str, np.ndarray]], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode("utf-8"))
        out = []
        for entry in manifest["params"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated blob at {entry['name']}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
            out.append((entry["name"], arr.copy()))
    return out, manifest.get("meta", {})


def save_model(path, model: Module, meta: dict | None = None) -> None:
    save_checkpoint(path, [(n, p.data) for n, p in model.named_parameters()], meta)


def load_model(path, model: Module) -> dict:
    """Load parameters by name into model; shape mismatches raise with a list
    of every differing parameter."""
    params, meta = load_checkpoint(path)
    current = dict(model.named_parameters())
    missing = [n for n in current if n not in {n2 for n2, _ in params}]
    unknown = [n for n, _ in params if n not in current]
    mismatched = [f"{n}: file {list(a.shape)} vs model {list(current[n].shape)}"
                  for n, a in params if n in current and tuple(a.shape) != current[n].shape]
    problems = []
    if mismatched:
        problems.append("shape mismatch: " + "; ".join(mismatched))
    if missing:
        problems.append("missing from file: " + ", ".join(missing))
    if unknown:
        problems.append("not in model: " + ", ".join(unknown))
    if problems:
        raise CheckpointError("checkpoint does not match model config. " + " | ".join(problems))
    for name, arr in params:
        p = current[name]
        p.data = arr.astype(p.dtype, copy=True)
    return meta
