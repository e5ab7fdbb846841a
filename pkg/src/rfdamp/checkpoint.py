"""Tensor container used for checkpoints and cached features.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"RFDCKPT1"
    bytes 8..15   uint64 manifest length L
    bytes 16..    L bytes of UTF-8 JSON manifest:
                    {"format": 1, "meta": {...},
                     "tensors": [{"name", "shape", "dtype": "float32",
                                  "offset", "nbytes"}, ...]}
    then          raw float32 buffers, row-major; ``offset`` counts from
                  the first byte after the manifest

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"RFDCKPT1"
FORMAT_VERSION = 1


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    manifest = json.dumps({"format": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ValidationError(f"not a checkpoint: bad magic {blob[:8]!r}")
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    try:
        manifest = json.loads(blob[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {manifest.get('format')!r}")
    base = 16 + mlen
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise ValidationError(f"tensor {e['name']}: unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ValidationError(f"tensor {e['name']} overruns the file")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest["meta"]


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def network_state(network, prune_state=None) -> dict[str, np.ndarray]:
    """Parameters, buffers and (if pruning) masks under stable names."""
    state = {f"param/{n}": p.data for n, p in network.named_parameters()}
    state.update({f"buffer/{n}": b.data for n, b in network.named_buffers()})
    if prune_state is not None:
        state.update({f"mask/{n}": m for n, m in sorted(prune_state.masks.items())})
    return state


def load_network_state(network, tensors: dict[str, np.ndarray], prune_state=None) -> None:
    targets = {f"param/{n}": p for n, p in network.named_parameters()}
    targets.update({f"buffer/{n}": b for n, b in network.named_buffers()})
    missing = sorted(set(targets) - set(tensors))
    if missing:
        raise ValidationError(f"checkpoint lacks tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, t in targets.items():
        if tensors[name].shape != t.shape:
            raise ValidationError(f"{name}: checkpoint shape {tensors[name].shape} != model shape {t.shape}")
        t.data[...] = tensors[name]
    if prune_state is not None:
        for name in prune_state.masks:
            key = f"mask/{name}"
            if key in tensors:
                prune_state.masks[name][...] = tensors[key]
