"""Checkpoint format: one directory per step.

  manifest.json  format version, step, config hash, entry index, metadata
  data/<key>.f32 raw little-endian float32 payload per named entry

Keys may contain '/' which maps to subdirectories. Writing is atomic
(temp dir + rename), loading verifies payload sizes against the index.
"""

from __future__ import annotations

import json
import shutil
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, corrupt, or incompatible checkpoint contents."""


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def tensor(self, key: str, dtype=torch.float32) -> torch.Tensor:
        if key not in self.entries:
            raise CheckpointError(f"checkpoint has no entry {key!r}")
        return torch.from_numpy(self.entries[key].copy()).to(dtype)

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.entries)

    def sub(self, prefix: str) -> dict[str, torch.Tensor]:
        return {
            k[len(prefix):]: torch.from_numpy(v.copy())
            for k, v in self.entries.items()
            if k.startswith(prefix)
        }


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(value, dtype=np.float32))


def save_checkpoint(path: Path, step: int, config_hash: str,
                    entries: dict[str, object], meta: dict | None = None) -> Path:
    """Atomically write a checkpoint directory at path."""
    path = Path(path)
    tmp = path.parent / f".tmp-{path.name}-{uuid.uuid4().hex[:8]}"
    data_dir = tmp / "data"
    data_dir.mkdir(parents=True)

    index = {}
    for key, value in sorted(entries.items()):
        arr = _to_array(value)
        rel = Path("data") / (key + ".f32")
        file_path = tmp / rel
        file_path.parent.mkdir(parents=True, exist_ok=True)
        arr.astype("<f4").tofile(file_path)
        index[key] = {"shape": list(arr.shape), "file": str(rel)}

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "config_hash": config_hash,
        "entries": index,
        "meta": meta or {},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{path} is not a checkpoint: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r}"
        )

    entries: dict[str, np.ndarray] = {}
    for key, info in manifest["entries"].items():
        file_path = path / info["file"]
        shape = tuple(info["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if not file_path.exists():
            raise CheckpointError(f"checkpoint entry {key!r} missing payload {file_path}")
        actual = file_path.stat().st_size
        if actual != expected:
            raise CheckpointError(
                f"checkpoint entry {key!r} has {actual} bytes, expected {expected}"
            )
        entries[key] = np.fromfile(file_path, dtype="<f4").reshape(shape)

    return Checkpoint(
        step=int(manifest["step"]),
        config_hash=manifest["config_hash"],
        entries=entries,
        meta=manifest.get("meta", {}),
    )
