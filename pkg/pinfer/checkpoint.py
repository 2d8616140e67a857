"""Checkpoint files.

Layout::

    bytes 0..7    magic b"PINFCKPT"
    bytes 8..15   header length L (u64, little endian, multiple of 8)
    bytes 16..    UTF-8 JSON header, space padded to L bytes
    then          payload: little-endian float32 tensors, each at an 8-byte
                  aligned offset relative to the payload start

The header lists name, shape, dtype, kind (param | buffer) and offset of every
tensor, plus the config hash, normalization stats and free-form metadata.
Weights are held as float64 in memory and stored as float32, so the first save
rounds them once; re-saving a loaded checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import ParamStore

MAGIC = b"PINFCKPT"
FORMAT_VERSION = 1


def _align8(n: int) -> int:
    return (n + 7) & ~7


def encode_checkpoint(store: ParamStore) -> bytes:
    records = []
    chunks: list[bytes] = []
    offset = 0
    entries = [(name, t.data, "param") for name, t in store.items()]
    entries += [(name, b, "buffer") for name, b in store.buffers()]
    for name, data, kind in entries:
        raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
        records.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": "float32",
            "kind": kind,
            "offset": offset,
        })
        padded = _align8(len(raw))
        chunks.append(raw + b"\x00" * (padded - len(raw)))
        offset += padded
    header = {
        "format": FORMAT_VERSION,
        "config_hash": store.metadata.get("config_hash", ""),
        "norm_stats": store.metadata.get("norm_stats"),
        "metadata": {k: v for k, v in store.metadata.items() if k not in ("config_hash", "norm_stats")},
        "payload_bytes": offset,
        "tensors": records,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * (_align8(len(text)) - len(text))
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> ParamStore:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise CheckpointError(f"truncated checkpoint header: need {hlen} bytes")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    base = 16 + hlen
    if base + int(header["payload_bytes"]) > len(blob):
        raise CheckpointError("truncated checkpoint payload")
    metadata = dict(header.get("metadata") or {})
    metadata["config_hash"] = header.get("config_hash", "")
    if header.get("norm_stats") is not None:
        metadata["norm_stats"] = header["norm_stats"]
    store = ParamStore(metadata)
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + int(rec["offset"])
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arr = data.astype(np.float64).reshape(shape)
        if rec["kind"] == "buffer":
            store.add_buffer(rec["name"], arr)
        else:
            store.add(rec["name"], arr)
    return store


def save_checkpoint(store: ParamStore, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(store))
    return path


def load_checkpoint(path: str | Path) -> ParamStore:
    return decode_checkpoint(Path(path).read_bytes())
