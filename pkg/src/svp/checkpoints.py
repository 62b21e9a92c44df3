"""Checkpoint container: JSON header + raw row-major float32 payload.

Layout: 8-byte little-endian header length, the UTF-8 JSON header
(format version, model config, lineage metadata, tensor names and shapes),
then every tensor's float32 data concatenated in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def _to_f32(value) -> np.ndarray:
    if hasattr(value, "detach"):  # torch tensor
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def save_checkpoint(path, state: dict, config: dict | None = None, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: _to_f32(v) for name, v in state.items()}
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(a.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint file: {path}")
    with open(path, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise DataError(f"{path}: truncated checkpoint header")
        (hlen,) = struct.unpack("<Q", raw_len)
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: malformed checkpoint header: {e}") from e
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format version "
                            f"{header.get('format_version')}")
        state = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise DataError(f"{path}: truncated payload for tensor {entry['name']!r}")
            state[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return state, header.get("config", {}), header.get("meta", {})


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_hash(path) -> str:
    return checkpoint_hash(path)


def diff_states(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> set[str]:
    """Names of tensors that differ bitwise between two loaded states."""
    changed = set()
    for name in set(a) | set(b):
        if name not in a or name not in b:
            changed.add(name)
        elif a[name].shape != b[name].shape or not np.array_equal(
                a[name].view(np.uint32), b[name].view(np.uint32)):
            changed.add(name)
    return changed
