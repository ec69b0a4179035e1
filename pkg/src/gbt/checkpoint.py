"""Checkpoint container shared by both stages.

A checkpoint is an uncompressed ``.npz`` archive (a ZIP file of NPY entries).
Parameter entries are named ``stage1/<param>`` and ``stage2/<param>`` and hold
little-endian float64 C-order arrays.  The entry ``__meta__`` is a uint8 array
of UTF-8 JSON with at least ``format_version``, ``stages`` and ``config``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def parameter_digest(state: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, stages: dict[str, dict[str, np.ndarray]], meta: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for stage, state in stages.items():
        for name, arr in state.items():
            arrays[f"{stage}/{name}"] = np.ascontiguousarray(arr, dtype="<f8")
    full_meta = {"format_version": FORMAT_VERSION, "stages": sorted(stages), **meta}
    arrays[META_KEY] = np.frombuffer(json.dumps(full_meta, sort_keys=True, default=str).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise CheckpointError(f"{path}: missing {META_KEY} entry")
        meta = json.loads(archive[META_KEY].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
        stages: dict[str, dict[str, np.ndarray]] = {}
        for key in archive.files:
            if key == META_KEY:
                continue
            stage, _, name = key.partition("/")
            stages.setdefault(stage, {})[name] = archive[key]
    return stages, meta
