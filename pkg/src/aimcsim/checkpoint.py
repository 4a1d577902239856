"""Versioned, checksummed model checkpoints.

Layout: 8-byte magic, u32 format version, u64 manifest length, JSON
manifest (architecture, layer configs, array descriptors), raw float64
little-endian array payload, trailing sha256 over manifest + payload.
Round-trips are byte-exact; loads verify the checksum and refuse
unknown versions.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .models import model_from_state

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "inspect_checkpoint"]

_MAGIC = b"AIMCCKPT"
_VERSION = 1
_HEADER = struct.Struct("<IQ")


class CheckpointError(ValueError):
    pass


def _array_entries(state: dict):
    for i, w in enumerate(state["weights"]):
        yield f"weights/{i}", np.asarray(w, dtype=np.float64)
    for name in sorted(state["digital"]):
        yield f"digital/{name}", np.asarray(state["digital"][name], dtype=np.float64)


def save_checkpoint(model, path: str | Path) -> None:
    state = model.state()
    arrays = list(_array_entries(state))
    descriptors = []
    offset = 0
    payload = bytearray()
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        descriptors.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.extend(raw)
        offset += len(raw)

    manifest = json.dumps(
        {"arch": state["arch"], "configs": state["configs"], "arrays": descriptors},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = manifest + bytes(payload)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(_VERSION, len(manifest)))
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def _read_manifest(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 + _HEADER.size + 32:
        raise CheckpointError(f"{path}: truncated header at offset {len(raw)}")
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, manifest_len = _HEADER.unpack_from(raw, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this toolkit reads {_VERSION})")
    body = raw[8 + _HEADER.size : -32]
    if len(body) < manifest_len:
        raise CheckpointError(f"{path}: truncated manifest at offset {8 + _HEADER.size + len(body)}")
    if hashlib.sha256(body).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch at offset {len(raw) - 32}")
    manifest = json.loads(body[:manifest_len])
    return manifest, body[manifest_len:]


def load_checkpoint(path: str | Path):
    manifest, payload = _read_manifest(path)
    weights: list[np.ndarray] = []
    digital: dict[str, np.ndarray] = {}
    for desc in manifest["arrays"]:
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = desc["offset"] + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: array {desc['name']} overruns payload at offset {len(payload)}")
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=desc["offset"]).reshape(shape).copy()
        kind, name = desc["name"].split("/", 1)
        if kind == "weights":
            weights.append(a)
        else:
            digital[name] = a
    state = {"arch": manifest["arch"], "configs": manifest["configs"], "weights": weights, "digital": digital}
    return model_from_state(state)


def inspect_checkpoint(path: str | Path) -> dict:
    """Manifest plus payload sizes, without materializing the model."""
    manifest, payload = _read_manifest(path)
    return {
        "arch": manifest["arch"],
        "n_analog_layers": len(manifest["configs"]),
        "arrays": [{"name": d["name"], "shape": d["shape"]} for d in manifest["arrays"]],
        "payload_bytes": len(payload),
        "configs": manifest["configs"],
    }
