"""``.ckpt`` files: length-prefixed JSON header, then a float64 LE blob.

Layout::

    8 bytes   little-endian uint64, header length L
    L bytes   UTF-8 JSON {"format", "version", "arch", "tensors": [...]}
    rest      concatenated little-endian float64 tensor data

Each manifest entry carries ``name``, ``shape`` and ``offset`` (in
elements, from the start of the blob).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ..io import atomic_write_bytes
from .module import Module

FORMAT = "marshnet-ckpt"
VERSION = 1


def module_state(module: Module) -> tuple[dict[str, np.ndarray], list[str]]:
    tensors = {name: p.data for name, p in module.named_parameters()}
    initialized = []
    for name, stats in module.named_buffers():
        tensors[f"{name}.mean"] = stats.mean
        tensors[f"{name}.var"] = stats.var
        if stats.initialized:
            initialized.append(name)
    return tensors, initialized


def dumps(arch: dict[str, Any], tensors: dict[str, np.ndarray], extra: dict[str, Any] | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"format": FORMAT, "version": VERSION, "arch": arch, "tensors": manifest}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def loads(raw: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(raw) < 8:
        raise ValueError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError("not a marshnet checkpoint")
    blob = np.frombuffer(raw, dtype="<f8", offset=8 + hlen)
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + count > blob.size:
            raise ValueError(f"checkpoint blob too short for tensor {entry['name']}")
        tensors[entry["name"]] = blob[start:start + count].reshape(entry["shape"]).astype(np.float64)
    return header, tensors


def save(path: str | Path, module: Module, arch: dict[str, Any], extra: dict[str, Any] | None = None) -> None:
    tensors, initialized = module_state(module)
    extra = dict(extra or {})
    extra["initialized_buffers"] = initialized
    atomic_write_bytes(Path(path), dumps(arch, tensors, extra))


def load(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def restore(module: Module, header: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into ``module`` (names and shapes must match)."""
    params = dict(module.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise ValueError(f"checkpoint lacks parameter {name}")
        p.assign(tensors[name])
    initialized = set(header.get("extra", {}).get("initialized_buffers", []))
    for name, stats in module.named_buffers():
        stats.mean = tensors[f"{name}.mean"].copy()
        stats.var = tensors[f"{name}.var"].copy()
        stats.initialized = name in initialized
