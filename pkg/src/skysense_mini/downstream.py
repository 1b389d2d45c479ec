"""Downstream usage harness.

A TaskAssembly picks which pre-trained modules participate (encoders,
fusion, geo-context), whether they are frozen, and which probe head sits
on top. Probes are deliberately minimal: a single linear layer on pooled
features (classification) or per-site features (segmentation), so scores
measure representation quality rather than head capacity.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import identity_view
from .geo import PrototypeBank, attend_geo_context
from .metrics import EvalMetrics, evaluate_predictions
from .model import MultiModalBackbone
from .sample_io import Dataset
from .synthetic import downsample_labels
from .types import ContractError, FeatureVolume, MultiModalSample

HEAD_KINDS = ("linear-classifier", "per-pixel-linear")


@dataclass(frozen=True)
class TaskAssembly:
    """Which pre-trained modules a downstream task combines, and how."""

    modalities: tuple[str, ...] = ("HR",)
    use_fusion: bool = False
    use_geo_context: bool = False
    freeze_backbone: bool = True
    freeze_fusion: bool = True  # separate switch: fusion may stay learnable
    head: str = "per-pixel-linear"

    def __post_init__(self):
        mods = tuple(self.modalities)
        if not mods or any(m not in ("HR", "Ms", "SAR") for m in mods):
            raise ContractError(f"illegal modality subset {mods}")
        if len(set(mods)) != len(mods):
            raise ContractError(f"duplicate modalities in {mods}")
        object.__setattr__(self, "modalities", mods)
        # temporal (Ms/SAR series) or multi-modal input needs the fusion stage
        if not self.use_fusion and (len(mods) > 1 or mods != ("HR",)):
            raise ContractError(
                f"assembly {mods} is temporal or multi-modal and requires use_fusion=true"
            )
        if self.head not in HEAD_KINDS:
            raise ContractError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")

    @property
    def name(self) -> str:
        parts = ["+".join(self.modalities)]
        parts.append("fusion" if self.use_fusion else "nofusion")
        if self.use_geo_context:
            parts.append("geo")
        parts.append("frozen" if self.freeze_backbone else "tuned")
        return "_".join(parts)


def extract_features(
    backbone: MultiModalBackbone,
    assembly: TaskAssembly,
    sample: MultiModalSample,
    bank: PrototypeBank | None = None,
) -> FeatureVolume:
    """Route a sample through the assembly's module chain.

    Output width is d, or 2d when geo-context attention is enabled.
    """
    for m in assembly.modalities:
        series = {"HR": sample.hr_image, "Ms": sample.ms_series, "SAR": sample.sar_series}[m]
        if series.size == 0:
            raise ContractError(f"assembly requires modality {m} absent from sample")

    view = identity_view(sample)
    volumes = backbone.encode_view(view, modalities=assembly.modalities)

    if assembly.use_fusion:
        out = backbone.fuse_view(view, volumes)
    else:
        out = volumes[assembly.modalities[0]]

    if assembly.use_geo_context:
        if bank is None:
            raise ContractError("assembly uses geo-context but no prototype bank was given")
        if not bank.frozen:
            raise ContractError("geo-context requires a frozen prototype bank")
        region = bank.region_index.region_of(sample.location)
        out = attend_geo_context(out, bank.region_slice(region))
    return out


def majority_label(label_map: np.ndarray) -> int:
    """Scene-level label: most frequent class, ties to the lowest id."""
    return int(np.bincount(label_map.ravel()).argmax())


def site_labels(label_map: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-site labels at feature resolution via block majority."""
    factor = label_map.shape[0] // grid[0]
    return downsample_labels(label_map, factor).ravel()


@dataclass
class ProbeResult:
    head: nn.Linear
    train_accuracy: float
    losses: list[float] = field(default_factory=list)


def _probe_matrix(
    backbone: MultiModalBackbone,
    assembly: TaskAssembly,
    dataset: Dataset,
    split: str,
    bank: PrototypeBank | None,
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Stack (features, labels) for a split under the assembly."""
    xs, ys, ids = [], [], []
    grid = backbone.grid
    with torch.no_grad():
        for sample in dataset.iter_split(split):
            if sample.label_map is None:
                raise ContractError(f"sample {sample.sample_id} has no labels")
            vol = extract_features(backbone, assembly, sample, bank=bank)
            if assembly.head == "per-pixel-linear":
                xs.append(vol.data.mean(dim=1))  # [N_S, width]
                ys.append(torch.from_numpy(site_labels(sample.label_map, grid).astype(np.int64)))
            else:
                xs.append(vol.data.mean(dim=(0, 1)).unsqueeze(0))  # [1, width]
                ys.append(torch.tensor([majority_label(sample.label_map)], dtype=torch.int64))
            ids.append(sample.sample_id)
    return torch.cat(xs), torch.cat(ys), ids


def _backbone_bytes(backbone: MultiModalBackbone, bank: PrototypeBank | None) -> bytes:
    import io

    buf = io.BytesIO()
    for _, t in sorted(backbone.state_dict().items()):
        buf.write(t.detach().cpu().numpy().tobytes())
    if bank is not None:
        buf.write(bank.prototypes.detach().cpu().numpy().tobytes())
    return buf.getvalue()


def train_probe(
    backbone: MultiModalBackbone,
    assembly: TaskAssembly,
    dataset: Dataset,
    n_classes: int,
    lr: float = 0.02,
    epochs: int = 40,
    batch_size: int = 64,
    weight_decay: float = 0.0,
    seed: int = 0,
    split: str = "train",
    bank: PrototypeBank | None = None,
) -> ProbeResult:
    """Fit the assembly's linear head with Adam on cross-entropy.

    With freeze_backbone the backbone (and bank) bytes are asserted
    unchanged; features are then precomputed once. Without it the chosen
    modules are optimized jointly with the head.
    """
    if not assembly.freeze_backbone:
        return _train_probe_finetune(
            backbone, assembly, dataset, n_classes, lr, epochs, batch_size, weight_decay, seed,
            split, bank,
        )

    before = _backbone_bytes(backbone, bank)
    x, y, _ = _probe_matrix(backbone, assembly, dataset, split, bank)
    head = _fit_linear(x, y, n_classes, lr, epochs, batch_size, weight_decay, seed)
    after = _backbone_bytes(backbone, bank)
    if before != after:
        raise ContractError("frozen-backbone probe modified backbone or bank bytes")
    with torch.no_grad():
        acc = float((head(x).argmax(dim=-1) == y).float().mean())
    return ProbeResult(head=head, train_accuracy=acc)


def _fit_linear(x, y, n_classes, lr, epochs, batch_size, weight_decay, seed) -> nn.Linear:
    torch.manual_seed(seed + 0x9E0BE)
    head = nn.Linear(x.shape[-1], n_classes)
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0BE]))
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(head(x[idx]), y[idx])
            loss.backward()
            opt.step()
    return head


def _train_probe_finetune(
    backbone, assembly, dataset, n_classes, lr, epochs, batch_size, weight_decay, seed, split, bank
) -> ProbeResult:
    """Joint optimization for fine-tuned assemblies (frozen parts excluded)."""
    work = copy.deepcopy(backbone)
    params = []
    for m in assembly.modalities:
        params += list(work.encoders[m].parameters())
    if assembly.use_fusion and not assembly.freeze_fusion:
        params += list(work.fusion.parameters())
    torch.manual_seed(seed + 0x9E0BE)
    grid = work.grid
    probe_width = None
    samples = list(dataset.iter_split(split))
    # peek at the width with a single forward
    with torch.no_grad():
        probe_width = extract_features(work, assembly, samples[0], bank=bank).width
    head = nn.Linear(probe_width, n_classes)
    opt = torch.optim.Adam(params + list(head.parameters()), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0BE]))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad(set_to_none=True)
            batch_losses = []
            for i in idx:
                s = samples[int(i)]
                vol = extract_features(work, assembly, s, bank=bank)
                if assembly.head == "per-pixel-linear":
                    logits = head(vol.data.mean(dim=1))
                    target = torch.from_numpy(site_labels(s.label_map, grid).astype(np.int64))
                else:
                    logits = head(vol.data.mean(dim=(0, 1)).unsqueeze(0))
                    target = torch.tensor([majority_label(s.label_map)], dtype=torch.int64)
                batch_losses.append(F.cross_entropy(logits, target))
            loss = torch.stack(batch_losses).mean()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    backbone.load_state_dict(work.state_dict())
    x, y, _ = _probe_matrix(backbone, assembly, dataset, split, bank)
    with torch.no_grad():
        acc = float((head(x).argmax(dim=-1) == y).float().mean())
    return ProbeResult(head=head, train_accuracy=acc, losses=losses)


def evaluate(
    head: nn.Linear,
    backbone: MultiModalBackbone,
    assembly: TaskAssembly,
    dataset: Dataset,
    split: str = "val",
    bank: PrototypeBank | None = None,
    n_classes: int | None = None,
) -> tuple[EvalMetrics, dict[str, np.ndarray]]:
    """Score a trained probe head; returns metrics and per-sample predictions."""
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"evaluation split {split!r} is empty")
    x, y, sample_ids = _probe_matrix(backbone, assembly, dataset, split, bank)
    with torch.no_grad():
        preds = head(x).argmax(dim=-1).cpu().numpy()
    labels = y.cpu().numpy()
    metrics = evaluate_predictions(preds, labels, n_classes)

    per_sample: dict[str, np.ndarray] = {}
    rows_per_sample = preds.shape[0] // len(sample_ids)
    for i, sid in enumerate(sample_ids):
        per_sample[sid] = preds[i * rows_per_sample : (i + 1) * rows_per_sample]
    return metrics, per_sample


def assemble_from_checkpoint(ckpt, assembly: TaskAssembly):
    """Build exactly the modules an assembly needs from checkpoint entries.

    Raises KeyError naming the first missing module, so callers can map it
    to the checkpoint/assembly-mismatch exit code. Modules the assembly
    does not use are left at fresh initialization and never run.
    """
    from .checkpoint import Checkpoint
    from .model import ModelConfig
    from .geo import RegionIndex

    assert isinstance(ckpt, Checkpoint)
    raw = dict(ckpt.meta.get("model_config", {}))
    if not raw:
        raise KeyError("checkpoint meta lacks model_config")
    config = ModelConfig(**raw)
    torch.manual_seed(0)
    backbone = MultiModalBackbone(config)

    def load_sub(module: nn.Module, prefix: str, label: str):
        if not ckpt.has_prefix(prefix):
            raise KeyError(f"checkpoint lacks module {label!r} (no entries under {prefix})")
        state = {}
        for name, tensor in module.state_dict().items():
            key = prefix + name
            if key not in ckpt.entries:
                raise KeyError(f"checkpoint lacks entry {key} for module {label!r}")
            state[name] = ckpt.tensor(key).reshape(tensor.shape)
        module.load_state_dict(state)

    for m in assembly.modalities:
        load_sub(backbone.encoders[m], f"encoder/{m}/", f"encoder {m}")
    if assembly.use_fusion:
        fusion_state = {}
        for name, tensor in backbone.fusion.state_dict().items():
            key = "dtpe/table" if name == "dtpe.table" else (
                "fusion/extra_token" if name == "extra_token" else f"fusion/{name}"
            )
            if key not in ckpt.entries:
                raise KeyError(f"checkpoint lacks entry {key} for module 'fusion'")
            fusion_state[name] = ckpt.tensor(key).reshape(tensor.shape)
        backbone.fusion.load_state_dict(fusion_state)

    bank = None
    if assembly.use_geo_context:
        if "geo/prototypes" not in ckpt.entries:
            raise KeyError("checkpoint lacks module 'geo/prototypes'")
        geo_meta = ckpt.meta.get("geo", {})
        rows, cols = geo_meta.get("region_grid", [1, 1])
        protos = ckpt.tensor("geo/prototypes")
        bank = PrototypeBank(RegionIndex(rows, cols), protos.shape[1], protos.shape[2])
        bank.prototypes = protos
        bank.freeze()
    backbone.eval()
    return backbone, bank


def cloud_ablation(
    backbone: MultiModalBackbone,
    bank: PrototypeBank | None,
    datasets: dict[float, Dataset],
    n_classes: int,
    head: str = "per-pixel-linear",
    probe_kwargs: dict | None = None,
) -> list[dict]:
    """Accuracy-vs-cloud table for assemblies with and without SAR.

    Returns one row per cloud rate with both OAs and their gap; whether
    the gap grows with cloud rate is reported by the caller, not asserted
    here.
    """
    probe_kwargs = probe_kwargs or {}
    with_sar = TaskAssembly(modalities=("HR", "Ms", "SAR"), use_fusion=True, head=head)
    without_sar = TaskAssembly(modalities=("HR", "Ms"), use_fusion=True, head=head)
    rows = []
    for rate in sorted(datasets):
        ds = datasets[rate]
        oas = {}
        for label, assembly in (("with_sar", with_sar), ("without_sar", without_sar)):
            result = train_probe(backbone, assembly, ds, n_classes, bank=bank, **probe_kwargs)
            metrics, _ = evaluate(result.head, backbone, assembly, ds, split="val", bank=bank,
                                  n_classes=n_classes)
            oas[label] = metrics.overall_accuracy
        rows.append(
            {
                "cloud_rate": rate,
                "oa_with_sar": oas["with_sar"],
                "oa_without_sar": oas["without_sar"],
                "gap": oas["with_sar"] - oas["without_sar"],
            }
        )
    return rows
