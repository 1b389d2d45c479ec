"""Acceptance suite: every release-gating criterion, one test each.

Each test prints one `ACCEPTANCE <name>: PASS/FAIL` line. Criteria 4-8
share a single 500-step pre-training run on a 512-sample dataset (the
default desk-scale configuration), built once per session.
"""

import dataclasses
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from skysense_mini.checkpoint import load_checkpoint
from skysense_mini.config import Config
from skysense_mini.downstream import (
    TaskAssembly,
    assemble_from_checkpoint,
    cloud_ablation,
    evaluate,
    extract_features,
    site_labels,
    train_probe,
)
from skysense_mini.fusion import FusionConfig, TemporalFusion
from skysense_mini.geo import PrototypeBank, RegionIndex, prototype_argmax, sinkhorn_assign
from skysense_mini.losses import (
    ProjectionHead,
    loss_align,
    loss_image,
    loss_object,
    loss_pixel,
    pairwise_cl_loss,
)
from skysense_mini.metrics import adjusted_rand_index
from skysense_mini.model import MultiModalBackbone
from skysense_mini.pretrain import Pretrainer, TeacherStudentPair, pretrain_run
from skysense_mini.sample_io import Dataset
from skysense_mini.synthetic import generate_dataset
from skysense_mini.types import AxisKind, FeatureVolume

torch.set_num_threads(2)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# shared desk-scale run (criteria 4-8)
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = Config()
    assert cfg.pretrain.steps == 500 and cfg.data.n_samples == 512
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    out = root / "run"
    generate_dataset(cfg.data.world_spec(cfg.seed), cfg.data.n_samples, data)
    t0 = time.time()
    summary = pretrain_run(cfg, data, out)
    train_minutes = (time.time() - t0) / 60
    assert summary["status"] == "complete"
    return {
        "config": cfg,
        "data": Dataset(data),
        "out": out,
        "train_minutes": train_minutes,
    }


def _probe_oa(backbone, assembly, dataset, cfg, bank=None) -> float:
    pc = cfg.probe
    result = train_probe(
        backbone, assembly, dataset, cfg.data.num_classes,
        lr=pc.lr, epochs=pc.epochs, batch_size=pc.batch_size,
        weight_decay=pc.weight_decay, seed=cfg.seed, bank=bank,
    )
    metrics, _ = evaluate(
        result.head, backbone, assembly, dataset, split="val", bank=bank,
        n_classes=cfg.data.num_classes,
    )
    return metrics.overall_accuracy


# --------------------------------------------------------------------------
# criterion 1: Sinkhorn correctness
# --------------------------------------------------------------------------


def test_criterion_1_sinkhorn_correctness():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_marginal = 0.0
    worst_oracle = 0.0
    for _ in range(200):
        n_s = int(rng.integers(2, 17))
        n_p = int(rng.integers(2, 17))
        m = rng.uniform(-1.0, 1.0, size=(n_s, n_p))

        # marginals under the converged assignment
        res = sinkhorn_assign(torch.as_tensor(m), n_iters=20_000, epsilon=0.05, tol=1e-5)
        worst_marginal = max(worst_marginal, res.row_residual, res.col_residual)

        # 200-iteration result vs an independent alternating-normalization oracle
        impl = sinkhorn_assign(torch.as_tensor(m), n_iters=200, epsilon=0.05).assignment.numpy()
        s = np.exp((m - m.max()) / 0.05)
        for _ in range(200):
            s = s / s.sum(axis=1, keepdims=True) / n_s
            s = s / s.sum(axis=0, keepdims=True) / n_p
        worst_oracle = max(worst_oracle, float(np.abs(impl - s).max()))

    elapsed = time.time() - t0
    ok = worst_marginal < 1e-4 and worst_oracle < 1e-5 and elapsed < 10.0
    report(
        "1-sinkhorn",
        ok,
        f"200 matrices: worst marginal {worst_marginal:.2e} (<1e-4), "
        f"worst |impl-oracle| {worst_oracle:.2e} (<1e-5), {elapsed:.1f}s (<10s)",
    )


# --------------------------------------------------------------------------
# criterion 2: exact-formula suite
# --------------------------------------------------------------------------


def test_criterion_2_exact_formulas():
    t0 = time.time()
    failures = []

    # teacher EMA: theta' <- m theta' + (1-m) theta, same-precision exact
    torch.manual_seed(0)
    pair = TeacherStudentPair(nn.ModuleDict({"net": nn.Linear(8, 8)}), momentum=0.97)
    with torch.no_grad():
        for p in pair.student.parameters():
            p.add_(torch.randn_like(p))
    before = [p.clone() for p in pair.teacher.parameters()]
    pair.ema_update()
    for p_t, p_b, p_s in zip(pair.teacher.parameters(), before, pair.student.parameters()):
        if not torch.equal(p_t, 0.97 * p_b + (1.0 - 0.97) * p_s):
            failures.append("teacher-ema")

    # prototype EMA, m = 0 degenerate and general m
    for m in (0.0, 0.9):
        bank = PrototypeBank(RegionIndex(2, 2), 3, 4, momentum=m,
                             generator=torch.Generator().manual_seed(1))
        s = torch.rand(5, 3)
        f = torch.rand(5, 4)
        before_p = bank.prototypes[1].clone()
        bank.update(1, s, f)
        if not torch.equal(bank.prototypes[1], m * before_p + (1.0 - m) * (s.T @ f)):
            failures.append(f"prototype-ema-m{m}")

    # concat slicing
    from skysense_mini.fusion import concat_temporal

    g = torch.Generator().manual_seed(2)
    vols = [
        FeatureVolume(torch.randn(4, t, 8, generator=g), (2, 2), AxisKind.PER_MODALITY)
        for t in (1, 3, 2)
    ]
    cat = concat_temporal(*vols)
    if not (
        torch.equal(cat.data[:, 0:1], vols[0].data)
        and torch.equal(cat.data[:, 1:4], vols[1].data)
        and torch.equal(cat.data[:, 4:6], vols[2].data)
    ):
        failures.append("concat-slicing")

    # date-encoding lookup
    from skysense_mini.fusion import DatePositionalTable, add_date_encoding

    torch.manual_seed(3)
    table = DatePositionalTable(8)
    days = [0, 17, 364, 17]
    dated = add_date_encoding(vols[1], days[:3], table)
    for t, day in enumerate(days[:3]):
        if not torch.equal(dated.data[:, t], vols[1].data[:, t] + table.table[day]):
            failures.append("date-lookup")
            break

    # attend_geo_context: width 2d and the single-prototype case
    from skysense_mini.geo import attend_geo_context

    fused = FeatureVolume(torch.randn(4, 1, 8, generator=g), (2, 2), AxisKind.FUSED)
    protos = torch.randn(5, 8, generator=g)
    out = attend_geo_context(fused, protos)
    if out.width != 16 or not torch.equal(out.data[:, :, :8], fused.data):
        failures.append("attend-width")
    single = attend_geo_context(fused, protos[:1])
    if not torch.allclose(single.data[:, 0, 8:], protos[:1].expand(4, 8)):
        failures.append("attend-single-prototype")

    # total loss arithmetic: emitted total equals alpha*mgcl + beta*align,
    # recomputed in the same float32 precision
    for alpha, beta in ((1.0, 1.0), (0.5, 2.0)):
        mgcl = np.float32(3.7251)
        align = np.float32(1.2344)
        total = np.float32(np.float32(alpha) * mgcl) + np.float32(np.float32(beta) * align)
        t_total = float(
            torch.tensor(alpha) * torch.tensor(mgcl) + torch.tensor(beta) * torch.tensor(align)
        )
        if np.float32(t_total) != total:
            failures.append("loss-arithmetic")

    elapsed = time.time() - t0
    ok = not failures and elapsed < 30.0
    report("2-exact-formulas", ok, f"failures: {failures or 'none'}, {elapsed:.1f}s (<30s)")


# --------------------------------------------------------------------------
# criterion 3: gradient suite (float64, rtol 1e-3)
# --------------------------------------------------------------------------


def _fd_check(fn, x: torch.Tensor, n_probes: int, rng, rel=1e-3) -> list[str]:
    """Central finite differences at sampled coordinates of x."""
    x.grad = None
    fn(x).backward()
    grad = x.grad.clone()
    errs = []
    eps = 1e-6
    flat = x.detach().reshape(-1)
    for _ in range(n_probes):
        i = int(rng.integers(0, flat.numel()))
        with torch.no_grad():
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grad.reshape(-1)[i])
        if abs(analytic - numeric) > rel * max(abs(numeric), 1e-7):
            errs.append(f"analytic {analytic:.3e} vs numeric {numeric:.3e}")
    return errs


def test_criterion_3_gradient_suite(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(0)
    failures = []
    torch.manual_seed(0)
    k = 8
    heads = dict(
        student_head=ProjectionHead(6, 12, k).double(),
        teacher_head=ProjectionHead(6, 12, k).double(),
        student_temp=0.1,
        teacher_temp=0.04,
        center=torch.zeros(k, dtype=torch.float64),
    )

    # pairwise loss wrt student features
    f_t = torch.randn(4, 6, dtype=torch.float64)
    f_s = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    errs = _fd_check(lambda x: pairwise_cl_loss(x, f_t, **heads), f_s, 6, rng)
    if errs:
        failures.append(("pairwise", errs[0]))

    # pixel / object / image losses wrt the student volume
    data_t = torch.randn(6, 2, 6, dtype=torch.float64)
    vol_t = FeatureVolume(data_t, (2, 3), AxisKind.PER_MODALITY)
    idx = np.arange(5)

    def on_volume(loss_fn):
        def wrapped(x):
            vol_s = FeatureVolume(x, (2, 3), AxisKind.PER_MODALITY)
            return loss_fn(vol_s)
        return wrapped

    for name, fn in (
        ("pixel", on_volume(lambda v: loss_pixel(v, vol_t, idx, idx + 1, **heads))),
        ("object", on_volume(lambda v: loss_object(v, vol_t, idx, idx + 1, n_clusters=2, **heads))),
        ("image", on_volume(lambda v: loss_image(v, vol_t, **heads))),
    ):
        x = torch.randn(6, 2, 6, dtype=torch.float64, requires_grad=True)
        errs = _fd_check(fn, x, 6, rng)
        if errs:
            failures.append((name, errs[0]))

    # alignment loss wrt one modality's embeddings
    z_ms = torch.randn(3, 6, dtype=torch.float64)
    z_sar = torch.randn(3, 6, dtype=torch.float64)
    x = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    errs = _fd_check(
        lambda e: loss_align({"HR": e, "Ms": z_ms, "SAR": z_sar}, temperature=0.2), x, 6, rng
    )
    if errs:
        failures.append(("align", errs[0]))

    # fuse wrt its input sequence
    fusion = TemporalFusion(FusionConfig(dim=8, depth=2, num_heads=2)).double()
    probe = torch.randn(3, 8, dtype=torch.float64)
    x = torch.randn(3, 4, 8, dtype=torch.float64, requires_grad=True)
    errs = _fd_check(lambda d: (fusion(d)[0] * probe).sum(), x, 6, rng)
    if errs:
        failures.append(("fuse", errs[0]))

    # end-to-end total loss over a 32-parameter sample of the student
    cfg_raw = {
        "seed": 5,
        "data": {"n_samples": 8, "t_ms": 4, "t_sar": 2},
        "model": {"dim": 16, "encoder_depth": 1, "fusion_depth": 1, "encoder_heads": 2,
                  "fusion_heads": 2},
        "geo": {"n_prototypes": 4},
        "pretrain": {"steps": 2, "batch_size": 2, "head_hidden": 16, "head_out": 8,
                     "align_dim": 8, "t_ms_view": 2, "t_sar_view": 1, "local_crops": 1,
                     "n_clusters": 3},
    }
    from skysense_mini.config import config_from_dict

    cfg = config_from_dict(cfg_raw)
    data_dir = tmp_path / "grad_data"
    generate_dataset(cfg.data.world_spec(cfg.seed), cfg.data.n_samples, data_dir)
    trainer = Pretrainer(cfg, Dataset(data_dir), dtype=torch.float64)
    samples = trainer.select_batch(0)

    def total_loss() -> torch.Tensor:
        components, _ = trainer.compute_losses(samples, 0)
        return components["total"]

    params = [p for p in trainer.pair.student.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    total_loss().backward()
    sizes = np.array([p.numel() for p in params])
    cum = np.cumsum(sizes)
    eps = 1e-5
    n_checked = 0
    for _ in range(32):
        flat_i = int(rng.integers(0, int(cum[-1])))
        p_idx = int(np.searchsorted(cum, flat_i, side="right"))
        local_i = flat_i - (0 if p_idx == 0 else int(cum[p_idx - 1]))
        p = params[p_idx]
        flat = p.detach().reshape(-1)
        with torch.no_grad():
            orig = float(flat[local_i])
            flat[local_i] = orig + eps
            up = float(total_loss())
            flat[local_i] = orig - eps
            down = float(total_loss())
            flat[local_i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[local_i])
        n_checked += 1
        if abs(analytic - numeric) > 1e-3 * max(abs(numeric), 1e-6):
            failures.append(("end-to-end", f"param {p_idx}[{local_i}]: "
                             f"analytic {analytic:.4e} vs numeric {numeric:.4e}"))

    elapsed = time.time() - t0
    ok = not failures and elapsed < 300.0
    report(
        "3-gradients",
        ok,
        f"{n_checked} end-to-end coords + component checks, "
        f"failures: {failures or 'none'}, {elapsed:.0f}s (<300s)",
    )


# --------------------------------------------------------------------------
# criterion 4: training sanity
# --------------------------------------------------------------------------


def test_criterion_4_training_sanity(desk_run):
    records = [
        json.loads(line)
        for line in (desk_run["out"] / "metrics.jsonl").read_text().splitlines()
    ]
    assert len(records) == 500
    finite = all(np.isfinite(r["loss_total"]) for r in records)
    early = float(np.mean([r["loss_total"] for r in records[:100]]))
    late = float(np.mean([r["loss_total"] for r in records[400:500]]))
    minutes = desk_run["train_minutes"]
    ok = finite and late < early and minutes < 30.0
    report(
        "4-training-sanity",
        ok,
        f"mean loss [0,100): {early:.3f} vs [400,500): {late:.3f}, "
        f"finite: {finite}, {minutes:.1f} min (<30)",
    )


# --------------------------------------------------------------------------
# criterion 5: representation quality
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def final_checkpoint(desk_run):
    return load_checkpoint(desk_run["out"] / "checkpoints" / "step_000500")


@pytest.fixture(scope="module")
def probe_oas(desk_run, final_checkpoint):
    cfg = desk_run["config"]
    dataset = desk_run["data"]
    t0 = time.time()

    hr_assembly = TaskAssembly(modalities=("HR",), use_fusion=False, head="per-pixel-linear")
    mm_assembly = TaskAssembly(
        modalities=("HR", "Ms", "SAR"), use_fusion=True, head="per-pixel-linear"
    )
    geo_assembly = TaskAssembly(
        modalities=("HR", "Ms", "SAR"), use_fusion=True, use_geo_context=True,
        head="per-pixel-linear",
    )

    pre_hr_backbone, _ = assemble_from_checkpoint(final_checkpoint, hr_assembly)
    pre_mm_backbone, bank = assemble_from_checkpoint(final_checkpoint, geo_assembly)

    torch.manual_seed(cfg.seed + 99)  # an untrained twin of the same architecture
    random_backbone = MultiModalBackbone(cfg.model).eval()

    oas = {
        "pretrained_hr": _probe_oa(pre_hr_backbone, hr_assembly, dataset, cfg),
        "random_hr": _probe_oa(random_backbone, hr_assembly, dataset, cfg),
        "pretrained_mm": _probe_oa(pre_mm_backbone, mm_assembly, dataset, cfg),
        "pretrained_geo": _probe_oa(pre_mm_backbone, geo_assembly, dataset, cfg, bank=bank),
        "minutes": (time.time() - t0) / 60,
        "bank": bank,
        "backbone": pre_mm_backbone,
    }
    return oas


def test_criterion_5_representation_quality(probe_oas):
    gain = probe_oas["pretrained_hr"] - probe_oas["random_hr"]
    mm_ge_hr = probe_oas["pretrained_mm"] >= probe_oas["pretrained_hr"]
    ok = gain >= 0.10 and mm_ge_hr and probe_oas["minutes"] < 20.0
    report(
        "5-representation",
        ok,
        f"HR probe: pretrained {probe_oas['pretrained_hr']:.3f} vs random "
        f"{probe_oas['random_hr']:.3f} (gain {gain * 100:.1f} pts, need >= 10); "
        f"multi-modal {probe_oas['pretrained_mm']:.3f} >= HR-only: {mm_ge_hr}; "
        f"{probe_oas['minutes']:.1f} min (<20)",
    )


# --------------------------------------------------------------------------
# criterion 6: geo-context signal
# --------------------------------------------------------------------------


def test_criterion_6_geo_context(desk_run, probe_oas):
    cfg = desk_run["config"]
    dataset = desk_run["data"]
    drop = probe_oas["pretrained_mm"] - probe_oas["pretrained_geo"]

    backbone = probe_oas["backbone"]
    bank = probe_oas["bank"]
    grid = backbone.grid
    by_region_proto: dict[int, list] = {}
    by_region_label: dict[int, list] = {}
    with torch.no_grad():
        for sample in dataset.iter_split("val"):
            fused = extract_features(
                backbone,
                TaskAssembly(modalities=("HR", "Ms", "SAR"), use_fusion=True),
                sample,
            )
            region = bank.region_index.region_of(sample.location)
            ids = prototype_argmax(fused, bank.region_slice(region)).ravel()
            by_region_proto.setdefault(region, []).append(ids)
            by_region_label.setdefault(region, []).append(site_labels(sample.label_map, grid))

    aris, weights = [], []
    for region in by_region_proto:
        protos = np.concatenate(by_region_proto[region])
        labels = np.concatenate(by_region_label[region])
        aris.append(adjusted_rand_index(protos, labels))
        weights.append(len(protos))
    ari = float(np.average(aris, weights=weights))

    ok = drop <= 0.005 and ari >= 0.30
    report(
        "6-geo-context",
        ok,
        f"OA with geo {probe_oas['pretrained_geo']:.3f} vs without "
        f"{probe_oas['pretrained_mm']:.3f} (drop {drop * 100:.2f} pts, allowed 0.5); "
        f"prototype-map ARI {ari:.3f} (need >= 0.30)",
    )


# --------------------------------------------------------------------------
# criterion 7: cloud ablation shape
# --------------------------------------------------------------------------


def test_criterion_7_cloud_ablation(desk_run, final_checkpoint, tmp_path):
    cfg = desk_run["config"]
    assembly = TaskAssembly(modalities=("HR", "Ms", "SAR"), use_fusion=True)
    backbone, _ = assemble_from_checkpoint(final_checkpoint, assembly)

    datasets = {}
    for rate in (0.0, 0.25, 0.5, 0.75, 1.0):
        spec = dataclasses.replace(cfg.data.world_spec(cfg.seed), cloud_rate=rate)
        root = tmp_path / f"cloud_{int(rate * 100):03d}"
        generate_dataset(spec, 96, root)
        datasets[rate] = Dataset(root)

    rows = cloud_ablation(
        backbone, None, datasets, cfg.data.num_classes,
        probe_kwargs=dict(lr=cfg.probe.lr, epochs=cfg.probe.epochs,
                          batch_size=cfg.probe.batch_size, seed=cfg.seed),
    )
    table = {r["cloud_rate"]: r for r in rows}
    gap0, gap100 = table[0.0]["gap"], table[1.0]["gap"]
    # with fully clouded Ms, the SAR-bearing assembly must still beat chance
    chance = 1.0 / cfg.data.num_classes
    sar_at_full_cloud = table[1.0]["oa_with_sar"]

    ok = gap100 > gap0 and sar_at_full_cloud > chance
    detail = ", ".join(
        f"rate {r['cloud_rate']:.2f}: gap {r['gap'] * 100:+.1f} pts" for r in rows
    )
    report(
        "7-cloud-ablation",
        ok,
        f"{detail}; gap(1.0) > gap(0.0): {gap100 > gap0}; "
        f"with-SAR OA at full cloud {sar_at_full_cloud:.3f} > chance {chance:.3f}",
    )


# --------------------------------------------------------------------------
# criterion 8: determinism and resumability
# --------------------------------------------------------------------------


def test_criterion_8_determinism_and_resume(desk_run, tmp_path):
    cfg = desk_run["config"]
    data_root = desk_run["data"].root

    # same-seed reruns produce identical metrics logs (60-step replicas)
    short = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, steps=60))
    out_a, out_b = tmp_path / "rerun_a", tmp_path / "rerun_b"
    pretrain_run(short, data_root, out_a)
    pretrain_run(short, data_root, out_b)
    logs_identical = (out_a / "metrics.jsonl").read_bytes() == (out_b / "metrics.jsonl").read_bytes()

    # the rerun's metrics prefix equals the big run's (same seed, same steps)
    big_prefix = "".join(
        (desk_run["out"] / "metrics.jsonl").read_text().splitlines(keepends=True)[:60]
    )
    prefix_matches = big_prefix == (out_a / "metrics.jsonl").read_text()

    # resume at step 400 reproduces the straight run's parameters bitwise
    resumed_out = tmp_path / "resumed"
    pretrain_run(cfg, data_root, resumed_out,
                 resume=desk_run["out"] / "checkpoints" / "step_000400")
    straight = load_checkpoint(desk_run["out"] / "checkpoints" / "step_000500")
    resumed = load_checkpoint(resumed_out / "checkpoints" / "step_000500")
    bitwise = straight.entries.keys() == resumed.entries.keys() and all(
        np.array_equal(straight.entries[k], resumed.entries[k]) for k in straight.entries
    )

    ok = logs_identical and prefix_matches and bitwise
    report(
        "8-determinism",
        ok,
        f"rerun logs identical: {logs_identical}, prefix matches big run: {prefix_matches}, "
        f"resume-at-400 bitwise equal at 500: {bitwise}",
    )
