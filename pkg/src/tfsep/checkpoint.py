"""Flat binary checkpoint archive.

Layout::

    b"TFSEPCK1"                    8-byte magic
    uint32 little-endian           length of the JSON manifest in bytes
    manifest (UTF-8 JSON)          {"meta": {...}, "tensors": [entry, ...]}
    payload                        little-endian float32 tensors, back to back

Each tensor entry carries ``name``, ``section`` (``params``, ``buffers``,
``adam.m``, ``adam.v``), ``dtype``, ``shape``, ``offset`` (relative to the
payload start), ``nbytes`` and ``crc32`` of its bytes.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import ParamStore

MAGIC = b"TFSEPCK1"


class CheckpointError(ValueError):
    pass


def save_archive(path, sections: dict[str, dict[str, np.ndarray]], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for section, tensors in sections.items():
        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({
                "name": name,
                "section": section,
                "dtype": "float32",
                "shape": list(np.shape(arr)),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            })
            blobs.append(blob)
            offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_archive(path):
    """Return ``(sections, meta)``; verifies every checksum."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    base = 12 + hlen
    sections: dict[str, dict[str, np.ndarray]] = {}
    for e in header["tensors"]:
        if e["dtype"] != "float32":
            raise CheckpointError(f"{path}: {e['name']} has unsupported dtype {e['dtype']}")
        blob = raw[base + e["offset"]:base + e["offset"] + e["nbytes"]]
        if len(blob) != e["nbytes"]:
            raise CheckpointError(f"{path}: {e['name']} truncated")
        if zlib.crc32(blob) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['section']}/{e['name']}")
        arr = np.frombuffer(blob, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        sections.setdefault(e["section"], {})[e["name"]] = arr
    return sections, header["meta"]


def store_sections(store: ParamStore) -> dict:
    return {
        "params": {n: store[n] for n in store.names() if store.is_trainable(n)},
        "buffers": {n: store[n] for n in store.names() if not store.is_trainable(n)},
    }


def restore_store(store: ParamStore, sections: dict) -> None:
    wanted = set(store.names())
    found = {}
    for sec in ("params", "buffers"):
        found.update(sections.get(sec, {}))
    missing = wanted - set(found)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for n in store.names():
        store[n] = found[n]


def save_model(path, store: ParamStore, meta: dict) -> None:
    save_archive(path, store_sections(store), meta)


def load_model(path):
    """Return ``(store, model, meta)`` rebuilt from a checkpoint."""
    from .model import ModelConfig, build

    sections, meta = load_archive(path)
    cfg = ModelConfig.from_dict(meta["model"])
    store, model = build(cfg, 0)
    store = store.astype(np.float32)
    restore_store(store, sections)
    return store, model, meta
