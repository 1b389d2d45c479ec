"""Teacher-student pre-training.

Two augmented view-sets of every sample go through both branches; the
summed pixel/object/image losses over each modality and the fused feature
form the multi-granularity term, in-batch cross-modal InfoNCE the
alignment term, and the total is alpha * mgcl + beta * align. The teacher
follows the student by parameter EMA and receives no gradient; geo
prototypes follow the student's fused features by EMA without a loss term.

Determinism: module initialization is seeded once; every step draws its
batch indices and augmentations from generators keyed by (seed, step), so
a resumed run replays the exact randomness of a straight run.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .augment import AugmentConfig, View, ViewCorrespondence, augment
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import Config
from .fusion import add_date_encoding, concat_temporal
from .geo import PrototypeBank, RegionIndex, cosine_similarity, sinkhorn_assign
from .model import MultiModalBackbone, backbone_to_entries
from .sample_io import Dataset
from .types import AxisKind, FeatureVolume, MultiModalSample

MODALITY_ORDER = ("HR", "Ms", "SAR")
GRANULARITIES = ("pix", "obj", "img")


class NumericAbortError(RuntimeError):
    """A loss component became non-finite; the step was aborted."""

    def __init__(self, message: str, components: dict[str, float]):
        super().__init__(message)
        self.components = components


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float
    student_temp: float
    teacher_temp: float
    align_temp: float
    center_momentum: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


class TeacherStudentPair:
    """Student modules plus an EMA-coupled teacher of the same architecture."""

    def __init__(self, student: nn.ModuleDict, momentum: float):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"teacher momentum {momentum} outside [0, 1]")
        self.student = student
        self.teacher = copy.deepcopy(student)
        self.teacher.requires_grad_(False)
        self.momentum = momentum

    @torch.no_grad()
    def ema_update(self) -> None:
        m = self.momentum
        for p_t, p_s in zip(self.teacher.parameters(), self.student.parameters()):
            # spelled exactly as the update rule so the arithmetic (and its
            # rounding) matches the formula term for term
            p_t.copy_(m * p_t + (1.0 - m) * p_s)


def _image_pool(volume: FeatureVolume) -> torch.Tensor:
    """Mean over sites and slices -> [d]."""
    return volume.data.mean(dim=(0, 1))


class Pretrainer:
    """Owns all mutable training state; one instance drives one run."""

    def __init__(self, config: Config, dataset: Dataset, dtype: torch.dtype = torch.float32):
        self.config = config
        self.dataset = dataset
        self.dtype = dtype
        pc = config.pretrain

        torch.manual_seed(config.seed)
        backbone = MultiModalBackbone(config.model)
        d = config.model.dim
        student = nn.ModuleDict(
            {
                "backbone": backbone,
                "cl_head": L.ProjectionHead(d, pc.head_hidden, pc.head_out),
                "align_HR": L.ProjectionHead(d, pc.head_hidden, pc.align_dim),
                "align_Ms": L.ProjectionHead(d, pc.head_hidden, pc.align_dim),
                "align_SAR": L.ProjectionHead(d, pc.head_hidden, pc.align_dim),
            }
        )
        self.pair = TeacherStudentPair(student, pc.teacher_momentum)

        rows, cols = config.data.region_grid
        self.bank = PrototypeBank(
            RegionIndex(rows, cols), config.geo.n_prototypes, d, momentum=config.geo.momentum
        )
        self.center = torch.zeros(pc.head_out)
        self.weights = LossWeights(
            alpha=pc.alpha,
            beta=pc.beta,
            student_temp=pc.student_temp,
            teacher_temp=pc.teacher_temp,
            align_temp=pc.align_temp,
            center_momentum=pc.center_momentum,
        )
        self.aug_config = pc.augment_config()
        self.optimizer = torch.optim.AdamW(
            self.pair.student.parameters(), lr=pc.base_lr, weight_decay=pc.weight_decay
        )
        if dtype != torch.float32:
            self.cast(dtype)
        self.train_ids = self.dataset.ids("train")
        if not self.train_ids:
            raise ValueError("dataset has no training split")
        self._pending_teacher_logits: list[torch.Tensor] = []
        self.empty_overlap_count = 0

    def cast(self, dtype: torch.dtype) -> None:
        self.dtype = dtype
        self.pair.student.to(dtype)
        self.pair.teacher.to(dtype)
        self.center = self.center.to(dtype)
        self.bank.prototypes = self.bank.prototypes.to(dtype)

    # ---- schedule ----------------------------------------------------

    def lr_at(self, step: int) -> float:
        pc = self.config.pretrain
        if pc.warmup_steps > 0 and step < pc.warmup_steps:
            return pc.base_lr * (step + 1) / pc.warmup_steps
        span = max(pc.steps - pc.warmup_steps, 1)
        progress = min((step - pc.warmup_steps) / span, 1.0)
        return pc.final_lr + 0.5 * (pc.base_lr - pc.final_lr) * (1.0 + math.cos(math.pi * progress))

    # ---- deterministic randomness -------------------------------------

    def _batch_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, 0xBA7C4, step]))

    def _aug_rng(self, step: int, position: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.config.seed, 0xA06A06, step, position])
        )

    def select_batch(self, step: int) -> list[MultiModalSample]:
        rng = self._batch_rng(step)
        n = self.config.pretrain.batch_size
        replace = n > len(self.train_ids)
        ids = rng.choice(self.train_ids, size=n, replace=replace)
        return [self.dataset.load(str(i)) for i in ids]

    # ---- forward -------------------------------------------------------

    def _views_for(self, samples: list[MultiModalSample], step: int):
        grid = self.pair.student["backbone"].grid
        views_u, views_v, corrs = [], [], []
        for k, sample in enumerate(samples):
            u, v, corr = augment(sample, self.aug_config, self._aug_rng(step, k), grid)
            views_u.append(u)
            views_v.append(v)
            corrs.append(corr)
        return views_u, views_v, corrs

    def _encode_views(self, branch: nn.ModuleDict, views: list[View]):
        """Batched per-modality volumes and fused volumes for a view list."""
        backbone: MultiModalBackbone = branch["backbone"]
        b = len(views)
        grid = backbone.grid
        n_s = grid[0] * grid[1]
        d = self.config.model.dim

        hr = torch.stack([v.hr_image for v in views]).to(self.dtype)
        ms = torch.cat([v.ms_series for v in views]).to(self.dtype)
        sar = torch.cat([v.sar_series for v in views]).to(self.dtype)
        t_ms = views[0].ms_series.shape[0]
        t_sar = views[0].sar_series.shape[0]

        f_hr = backbone.encoders["HR"](hr)  # [B, N_S, d]
        f_ms = backbone.encoders["Ms"](ms).reshape(b, t_ms, n_s, d)
        f_sar = backbone.encoders["SAR"](sar).reshape(b, t_sar, n_s, d)

        per_sample = []
        fused_inputs = []
        days = []
        for k, view in enumerate(views):
            vols = {
                "HR": FeatureVolume(f_hr[k].unsqueeze(1), grid, AxisKind.PER_MODALITY),
                "Ms": FeatureVolume(f_ms[k].permute(1, 0, 2), grid, AxisKind.PER_MODALITY),
                "SAR": FeatureVolume(f_sar[k].permute(1, 0, 2), grid, AxisKind.PER_MODALITY),
            }
            per_sample.append(vols)
            cat = concat_temporal(vols["HR"], vols["Ms"], vols["SAR"])
            dated = add_date_encoding(cat, list(view.dates.days), backbone.fusion.dtpe)
            fused_inputs.append(dated.data)
            days.append(view.dates.days)

        stacked = torch.stack(fused_inputs)  # [B, N_S, N_T, d]
        n_t = stacked.shape[2]
        fused_flat, _ = backbone.fusion(stacked.reshape(b * n_s, n_t, d))
        fused = fused_flat.reshape(b, n_s, 1, d)
        for k in range(b):
            per_sample[k]["fused"] = FeatureVolume(fused[k], grid, AxisKind.FUSED)
        return per_sample

    def _encode_locals(self, branch: nn.ModuleDict, views: list[View]) -> list[list[torch.Tensor]]:
        """Image-pooled features of each view's local crops, batched."""
        backbone: MultiModalBackbone = branch["backbone"]
        crops = [crop for view in views for crop in view.hr_locals]
        if not crops:
            return [[] for _ in views]
        sites = backbone.encoders["HR"](torch.stack(crops).to(self.dtype))  # [n_crops, n, d]
        pooled = sites.mean(dim=1)
        out: list[list[torch.Tensor]] = []
        i = 0
        for view in views:
            n = len(view.hr_locals)
            out.append([pooled[i + j] for j in range(n)])
            i += n
        return out

    # ---- losses --------------------------------------------------------

    def _cl_kwargs(self) -> dict:
        return dict(
            student_head=self.pair.student["cl_head"],
            teacher_head=self._centering_teacher_head,
            student_temp=self.weights.student_temp,
            teacher_temp=self.weights.teacher_temp,
            center=self.center,
        )

    def _centering_teacher_head(self, f: torch.Tensor) -> torch.Tensor:
        logits = self.pair.teacher["cl_head"](f)
        self._pending_teacher_logits.append(logits.reshape(-1, logits.shape[-1]))
        return logits

    def _fgcl(
        self,
        vols_s: dict[str, FeatureVolume],
        vols_t: dict[str, FeatureVolume],
        idx_s,
        idx_t,
        locals_s: list[torch.Tensor],
    ) -> dict[str, torch.Tensor]:
        """Pixel + object + image losses for every modality and the fused map."""
        pc = self.config.pretrain
        out: dict[str, torch.Tensor] = {}
        kw = self._cl_kwargs()
        for name in MODALITY_ORDER + ("fused",):
            vs, vt = vols_s[name], vols_t[name]
            if len(idx_s) == 0:
                self.empty_overlap_count += 1
            out[f"pix_{name}"] = L.loss_pixel(vs, vt, idx_s, idx_t, **kw)
            out[f"obj_{name}"] = L.loss_object(
                vs, vt, idx_s, idx_t,
                n_clusters=pc.n_clusters,
                sinkhorn_iters=pc.cluster_iters,
                sinkhorn_epsilon=pc.cluster_epsilon,
                **kw,
            )
            extra = locals_s if name == "HR" else None
            out[f"img_{name}"] = L.loss_image(vs, vt, extra_student=extra, **kw)
        return out

    def compute_losses(self, samples: list[MultiModalSample], step: int):
        """All loss components for one batch; returns (components, aux)."""
        views_u, views_v, corrs = self._views_for(samples, step)
        student, teacher = self.pair.student, self.pair.teacher

        stu_u = self._encode_views(student, views_u)
        stu_v = self._encode_views(student, views_v)
        with torch.no_grad():
            tea_u = self._encode_views(teacher, views_u)
            tea_v = self._encode_views(teacher, views_v)
        loc_u = self._encode_locals(student, views_u)
        loc_v = self._encode_locals(student, views_v)

        b = len(samples)
        sums: dict[str, torch.Tensor] = {}
        for k in range(b):
            idx_u, idx_v = corrs[k].idx_u, corrs[k].idx_v
            # symmetrized: student(u) vs teacher(v), then student(v) vs teacher(u)
            for comp, weight in (
                (self._fgcl(stu_u[k], tea_v[k], idx_u, idx_v, loc_u[k]), 0.5),
                (self._fgcl(stu_v[k], tea_u[k], idx_v, idx_u, loc_v[k]), 0.5),
            ):
                for key, value in comp.items():
                    sums[key] = sums.get(key, 0.0) + weight * value / b

        # cross-modal alignment on the student branch (first view set)
        align_inputs = {
            m: torch.stack([_image_pool(stu_u[k][m]) for k in range(b)]) for m in MODALITY_ORDER
        }
        embeddings = {m: student[f"align_{m}"](align_inputs[m]) for m in MODALITY_ORDER}
        loss_align = L.loss_align(embeddings, self.weights.align_temp)

        loss_mgcl = sum(sums.values())
        components = dict(sums)
        components["mgcl"] = loss_mgcl
        components["align"] = loss_align
        components["total"] = self.weights.alpha * loss_mgcl + self.weights.beta * loss_align
        aux = {"views_u": views_u, "views_v": views_v, "stu_u": stu_u, "corrs": corrs}
        return components, aux

    # ---- geo prototype learning ----------------------------------------

    def _update_prototypes(self, samples, stu_u, step: int) -> tuple[float, float]:
        row_res, col_res = [], []
        apply = step >= self.config.geo.start_step
        for k, sample in enumerate(samples):
            region = self.bank.region_index.region_of(sample.location)
            feats = stu_u[k]["fused"].data.squeeze(1).detach()
            sims = cosine_similarity(feats, self.bank.region_slice(region))
            result = sinkhorn_assign(
                sims,
                n_iters=self.config.geo.sinkhorn_iters,
                epsilon=self.config.geo.sinkhorn_epsilon,
            )
            if apply:
                self.bank.update(region, result.assignment, feats)
            row_res.append(result.row_residual)
            col_res.append(result.col_residual)
        return float(np.mean(row_res)), float(np.mean(col_res))

    # ---- step ------------------------------------------------------------

    def train_step(self, step: int, samples: list[MultiModalSample] | None = None) -> dict:
        if samples is None:
            samples = self.select_batch(step)
        lr = self.lr_at(step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self._pending_teacher_logits = []
        components, aux = self.compute_losses(samples, step)
        total = components["total"]

        values = {k: float(v.detach()) for k, v in components.items()}
        if not all(math.isfinite(v) for v in values.values()):
            bad = sorted(k for k, v in values.items() if not math.isfinite(v))
            raise NumericAbortError(f"non-finite loss component(s): {bad}", values)

        if self.weights.alpha == 0.0 and self.weights.beta == 0.0:
            # identically-zero objective: zero gradient everywhere, so the
            # step is a no-op (decoupled weight decay must not sneak in)
            self.optimizer.zero_grad(set_to_none=True)
        else:
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
        self.pair.ema_update()

        # teacher centering over every teacher logit used this step
        if self._pending_teacher_logits:
            with torch.no_grad():
                batch_center = torch.cat(self._pending_teacher_logits).mean(dim=0)
                rho = self.weights.center_momentum
                self.center.mul_(rho).add_(batch_center, alpha=1.0 - rho)
        self._pending_teacher_logits = []

        row_res, col_res = self._update_prototypes(samples, aux["stu_u"], step)

        record = {"step": step, "lr": lr}
        record.update({f"loss_{k}": v for k, v in values.items()})
        record["geo_row_residual"] = row_res
        record["geo_col_residual"] = col_res
        record["empty_overlaps"] = self.empty_overlap_count
        return record

    # ---- checkpointing ---------------------------------------------------

    def checkpoint_entries(self) -> dict[str, torch.Tensor]:
        entries = backbone_to_entries(self.pair.teacher["backbone"])
        entries["geo/prototypes"] = self.bank.prototypes
        for name, tensor in self.pair.student["backbone"].state_dict().items():
            entries[f"train/student_backbone/{name}"] = tensor
        for head in ("cl_head", "align_HR", "align_Ms", "align_SAR"):
            for name, tensor in self.pair.student[head].state_dict().items():
                entries[f"train/student_{head}/{name}"] = tensor
        for name, tensor in self.pair.teacher["cl_head"].state_dict().items():
            entries[f"train/teacher_cl_head/{name}"] = tensor
        entries["train/center"] = self.center
        opt_state = self.optimizer.state_dict()["state"]
        for idx, state in opt_state.items():
            for key, value in state.items():
                entries[f"train/opt/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
        return entries

    def checkpoint_meta(self) -> dict:
        import dataclasses as dc

        return {
            "model_config": dc.asdict(self.config.model),
            "geo": {
                "region_grid": list(self.config.data.region_grid),
                "n_prototypes": self.config.geo.n_prototypes,
                "momentum": self.config.geo.momentum,
            },
        }

    def save(self, path: Path, step: int) -> Path:
        return save_checkpoint(
            path, step, self.config.hash(), self.checkpoint_entries(), self.checkpoint_meta()
        )

    def load_state(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.config.hash():
            raise CheckpointError(
                f"checkpoint config hash {ckpt.config_hash} does not match run config "
                f"{self.config.hash()}"
            )

        def load_module(module: nn.Module, prefix: str):
            state = {}
            for name, tensor in module.state_dict().items():
                key = prefix + name
                if key not in ckpt.entries:
                    raise CheckpointError(f"checkpoint missing entry {key}")
                state[name] = ckpt.tensor(key).reshape(tensor.shape).to(tensor.dtype)
            module.load_state_dict(state)

        from .model import entries_to_backbone

        teacher_backbone = entries_to_backbone(
            {k: ckpt.tensor(k) for k in ckpt.entries if not k.startswith(("train/", "geo/"))},
            self.config.model,
        )
        self.pair.teacher["backbone"].load_state_dict(teacher_backbone.state_dict())
        load_module(self.pair.student["backbone"], "train/student_backbone/")
        for head in ("cl_head", "align_HR", "align_Ms", "align_SAR"):
            load_module(self.pair.student[head], f"train/student_{head}/")
        load_module(self.pair.teacher["cl_head"], "train/teacher_cl_head/")
        self.center = ckpt.tensor("train/center").reshape(self.center.shape)
        self.bank.prototypes = ckpt.tensor("geo/prototypes").reshape(self.bank.prototypes.shape)

        opt_state = self.optimizer.state_dict()
        params = [p for g in opt_state["param_groups"] for p in g["params"]]
        state: dict[int, dict] = {}
        for idx in params:
            prefix = f"train/opt/{idx}/"
            keys = [k for k in ckpt.entries if k.startswith(prefix)]
            if not keys:
                continue
            entry: dict[str, torch.Tensor] = {}
            ordered = list(self.pair.student.parameters())
            shape = ordered[idx].shape
            for k in keys:
                name = k[len(prefix):]
                t = ckpt.tensor(k)
                entry[name] = t.reshape(shape) if name in ("exp_avg", "exp_avg_sq") else t.reshape(())
            state[idx] = entry
        opt_state["state"] = state
        self.optimizer.load_state_dict(opt_state)
        if self.dtype != torch.float32:
            self.cast(self.dtype)


def _truncate_jsonl(path: Path, n_lines: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    path.write_text("".join(line + "\n" for line in lines[:n_lines]))


def pretrain_run(config: Config, data_dir: Path, out_dir: Path, resume: Path | None = None) -> dict:
    """Run (or continue) pre-training; writes checkpoints and metrics logs.

    The metrics log is fully deterministic for a given config and seed;
    wall-clock timings go to a separate sidecar so reruns byte-match.
    """
    dataset = Dataset(Path(data_dir))
    trainer = Pretrainer(config, dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    timings_path = out / "timings.jsonl"
    ckpt_dir = out / "checkpoints"

    start = 0
    if resume is not None:
        ckpt = load_checkpoint(Path(resume))
        trainer.load_state(ckpt)
        start = ckpt.step
    else:
        metrics_path.write_text("")
        timings_path.write_text("")

    steps = config.pretrain.steps
    if start >= steps:
        return {"status": "complete", "steps_run": 0, "start": start, "steps": steps}

    _truncate_jsonl(metrics_path, start)
    _truncate_jsonl(timings_path, start)

    interval = config.pretrain.checkpoint_interval
    last_record = None
    with metrics_path.open("a") as metrics_f, timings_path.open("a") as timings_f:
        for step in range(start, steps):
            t0 = time.perf_counter()
            record = trainer.train_step(step)
            metrics_f.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_f.flush()
            timings_f.write(
                json.dumps({"step": step, "wall_s": time.perf_counter() - t0}) + "\n"
            )
            last_record = record
            done = step + 1
            if done % interval == 0 or done == steps:
                trainer.save(ckpt_dir / f"step_{done:06d}", done)

    return {
        "status": "complete",
        "steps_run": steps - start,
        "start": start,
        "steps": steps,
        "final_loss": None if last_record is None else last_record["loss_total"],
        "final_checkpoint": str(ckpt_dir / f"step_{steps:06d}"),
    }
