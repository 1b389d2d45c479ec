"""Prototype-map rendering: which prototype each feature site resembles most."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .downstream import TaskAssembly, extract_features
from .geo import PrototypeBank, prototype_argmax, prototype_color, render_prototype_raster
from .model import MultiModalBackbone
from .sample_io import Dataset
from .types import MultiModalSample

_FUSED_ASSEMBLY = TaskAssembly(modalities=("HR", "Ms", "SAR"), use_fusion=True)


def prototype_map(backbone: MultiModalBackbone, bank: PrototypeBank,
                  sample: MultiModalSample) -> np.ndarray:
    """[h, w] raster of argmax prototype ids for one sample's fused features."""
    with torch.no_grad():
        fused = extract_features(backbone, _FUSED_ASSEMBLY, sample)
    region = bank.region_index.region_of(sample.location)
    return prototype_argmax(fused, bank.region_slice(region))


def render_dataset_maps(backbone: MultiModalBackbone, bank: PrototypeBank, dataset: Dataset,
                        out_dir: Path, split: str | None = None,
                        limit: int | None = None) -> dict:
    """Write one PNG per sample plus a legend mapping prototype id -> color.

    Raster dimensions equal the feature-map dimensions; the legend lists
    exactly the ids that occur in the emitted rasters.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = dataset.ids(split)
    if limit is not None:
        ids = ids[:limit]
    seen: set[int] = set()
    for sid in ids:
        sample = dataset.load(sid)
        raster = prototype_map(backbone, bank, sample)
        seen.update(int(p) for p in np.unique(raster))
        Image.fromarray(render_prototype_raster(raster), mode="RGB").save(out / f"{sid}.png")
    legend = {str(pid): list(prototype_color(pid)) for pid in sorted(seen)}
    (out / "legend.json").write_text(json.dumps(legend, indent=1, sort_keys=True) + "\n")
    return legend
