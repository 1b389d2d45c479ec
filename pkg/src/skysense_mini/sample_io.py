"""On-disk dataset format.

One directory per sample:
  meta.json   location, dates, shapes, format version, optional cloud masks
  hr.f32      raw little-endian float32, shape in meta
  ms.f32      raw little-endian float32
  sar.f32     raw little-endian float32
  labels.i32  optional raw little-endian int32

A dataset directory holds the sample directories plus manifest.json with
sample ids and a split assignment.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .types import DateVector, GeoLocation, MultiModalSample

FORMAT_VERSION = 1


def _write_json(path: Path, obj) -> None:
    # sort_keys + fixed separators so identical content means identical bytes
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _write_raw(path: Path, arr: np.ndarray, dtype: str) -> None:
    np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path)


def _read_raw(path: Path, shape, dtype: str) -> np.ndarray:
    arr = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    return arr.reshape(shape).astype(dtype, copy=False)


def save_sample(sample: MultiModalSample, root: Path) -> Path:
    """Write one sample directory under root; returns the directory path."""
    d = Path(root) / sample.sample_id
    d.mkdir(parents=True, exist_ok=True)

    meta = {
        "format_version": FORMAT_VERSION,
        "sample_id": sample.sample_id,
        "location": {"latitude": sample.location.latitude, "longitude": sample.location.longitude},
        "dates": list(sample.dates.days),
        "shapes": {
            "hr": list(sample.hr_image.shape),
            "ms": list(sample.ms_series.shape),
            "sar": list(sample.sar_series.shape),
        },
    }
    if sample.label_map is not None:
        meta["shapes"]["labels"] = list(sample.label_map.shape)
    if sample.cloud_masks is not None:
        meta["cloud_masks"] = sample.cloud_masks.astype(int).tolist()

    _write_raw(d / "hr.f32", sample.hr_image, "float32")
    _write_raw(d / "ms.f32", sample.ms_series, "float32")
    _write_raw(d / "sar.f32", sample.sar_series, "float32")
    if sample.label_map is not None:
        _write_raw(d / "labels.i32", sample.label_map, "int32")
    _write_json(d / "meta.json", meta)
    return d


def load_sample(sample_dir: Path) -> MultiModalSample:
    d = Path(sample_dir)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported sample format version {meta.get('format_version')!r} in {d}")
    shapes = meta["shapes"]

    label_map = None
    if "labels" in shapes:
        label_map = _read_raw(d / "labels.i32", shapes["labels"], "int32")
    cloud_masks = None
    if "cloud_masks" in meta:
        cloud_masks = np.asarray(meta["cloud_masks"], dtype=bool)

    return MultiModalSample(
        sample_id=meta["sample_id"],
        hr_image=_read_raw(d / "hr.f32", shapes["hr"], "float32"),
        ms_series=_read_raw(d / "ms.f32", shapes["ms"], "float32"),
        sar_series=_read_raw(d / "sar.f32", shapes["sar"], "float32"),
        location=GeoLocation(**meta["location"]),
        dates=DateVector(tuple(meta["dates"])),
        label_map=label_map,
        cloud_masks=cloud_masks,
    )


class Dataset:
    """Directory of samples with a manifest carrying ids and splits."""

    def __init__(self, root: Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.sample_ids: list[str] = list(self.manifest["samples"])
        self.splits: dict[str, str] = dict(self.manifest["splits"])

    def __len__(self) -> int:
        return len(self.sample_ids)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return list(self.sample_ids)
        return [s for s in self.sample_ids if self.splits.get(s) == split]

    def load(self, sample_id: str) -> MultiModalSample:
        return load_sample(self.root / sample_id)

    def iter_split(self, split: str | None = None):
        for sid in self.ids(split):
            yield self.load(sid)


def write_manifest(root: Path, sample_ids: list[str], splits: dict[str, str], extra: dict | None = None) -> None:
    manifest = {"format_version": FORMAT_VERSION, "samples": list(sample_ids), "splits": dict(splits)}
    if extra:
        manifest.update(extra)
    _write_json(Path(root) / "manifest.json", manifest)
