"""Checkpoint container: a JSON manifest line followed by a little-endian blob.

The manifest lists, per tensor: name, parameter group, shape, dtype token and
byte offset into the blob. Round trips are bit-exact. Production tensors are
32-bit floats ("f4"); "f8"/"i8" are accepted so double-precision test models
and integer counters round-trip too.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_TOKENS = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _token_for(arr: np.ndarray) -> str:
    for token, code in _TOKENS.items():
        if arr.dtype == np.dtype(code).newbyteorder("="):
            return token
    raise ValueError(f"unsupported tensor dtype {arr.dtype} (use f4/f8/i8)")


def save_container(path, tensors: dict, groups: dict | None = None, meta: dict | None = None):
    """Write named arrays plus metadata. Insertion order of ``tensors`` is kept."""
    groups = groups or {}
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)  # before ascontiguousarray, which lifts 0-d to (1,)
        arr = np.ascontiguousarray(arr)
        token = _token_for(arr)
        data = arr.astype(_TOKENS[token], copy=False).tobytes()
        entries.append({
            "name": name,
            "group": groups.get(name, ""),
            "shape": shape,
            "dtype": token,
            "offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True)
    Path(path).write_bytes(header.encode("utf-8") + b"\n" + b"".join(chunks))


def load_container(path):
    """Returns (tensors, groups, meta); arrays are fresh writable copies."""
    raw = Path(path).read_bytes()
    split = raw.index(b"\n")
    manifest = json.loads(raw[:split].decode("utf-8"))
    blob = raw[split + 1:]
    tensors, groups = {}, {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=_TOKENS[e["dtype"]], count=count,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
        groups[e["name"]] = e["group"]
    return tensors, groups, manifest["meta"]
