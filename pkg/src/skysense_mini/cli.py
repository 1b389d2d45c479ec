"""Command-line entry point.

Subcommands: generate-data, pretrain, probe, viz-prototypes.
Exit codes: 0 success, 2 config error, 3 numeric abort, 4 checkpoint or
assembly mismatch.

Commands that produce a finished artifact build it in a temporary sibling
directory and rename it into place, so a failed run leaves nothing behind.
Every run writes run_manifest.json before any other output. The
SKYSENSE_MINI_THREADS environment variable caps torch worker threads
(default: machine cores).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import subprocess
import sys
import uuid
from datetime import datetime, timezone
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4


def _apply_thread_cap() -> None:
    import torch

    cap = os.environ.get("SKYSENSE_MINI_THREADS")
    if cap:
        try:
            n = max(1, int(cap))
        except ValueError:
            raise SystemExit(f"SKYSENSE_MINI_THREADS must be an integer, got {cap!r}")
        torch.set_num_threads(n)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str | None
    seed: int | None
    git_describe: str
    started_at: str
    output_dir: str
    ended_at: str | None = None

    @staticmethod
    def start(command: str, out_dir: Path, config_path=None, config_hash=None, seed=None) -> "RunManifest":
        return RunManifest(
            command=command,
            config_path=str(config_path) if config_path else None,
            config_hash=config_hash,
            seed=seed,
            git_describe=_git_describe(),
            started_at=datetime.now(timezone.utc).isoformat(),
            output_dir=str(out_dir),
        )

    def write(self, out_dir: Path) -> None:
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")

    def finish(self, out_dir: Path) -> None:
        self.ended_at = datetime.now(timezone.utc).isoformat()
        self.write(out_dir)


class _TempOutput:
    """Build into a temp sibling, atomically rename to the target on success."""

    def __init__(self, target: Path):
        self.target = Path(target)
        self.tmp = self.target.parent / f".tmp-{self.target.name}-{uuid.uuid4().hex[:8]}"

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if self.target.exists():
                shutil.rmtree(self.target)
            self.tmp.rename(self.target)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _load_config(path: str, seed: int | None):
    from .config import ConfigError, load_config

    try:
        return load_config(Path(path), seed_override=seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def cmd_generate_data(args) -> int:
    from .synthetic import generate_dataset

    config = _load_config(args.config, args.seed)
    spec = config.data.world_spec(config.seed)
    with _TempOutput(Path(args.out)) as tmp:
        manifest = RunManifest.start(
            "generate-data", args.out, args.config, config.hash(), config.seed
        )
        manifest.write(tmp)
        generate_dataset(spec, config.data.n_samples, tmp)
        manifest.finish(tmp)
    print(f"wrote {config.data.n_samples} samples to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .checkpoint import CheckpointError
    from .pretrain import NumericAbortError, pretrain_run

    config = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.start("pretrain", out, args.config, config.hash(), config.seed)
    manifest.write(out)
    try:
        summary = pretrain_run(config, Path(args.data), out, resume=args.resume)
    except NumericAbortError as e:
        print(f"numeric abort: {e}; components: {e.components}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    manifest.finish(out)
    if summary["steps_run"] == 0:
        print(f"nothing to do: checkpoint already at step {summary['start']}")
    else:
        print(f"pre-training complete: {summary['steps_run']} steps, "
              f"final loss {summary['final_loss']:.4f}")
    return EXIT_OK


def _parse_assembly(text: str):
    from .downstream import TaskAssembly
    from .types import ContractError

    path = Path(text)
    raw = path.read_text() if text.endswith(".json") and path.exists() else text
    try:
        spec = json.loads(raw)
        spec["modalities"] = tuple(spec.get("modalities", ("HR",)))
        return TaskAssembly(**spec)
    except (json.JSONDecodeError, TypeError, ContractError) as e:
        print(f"config error: bad assembly spec: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def cmd_probe(args) -> int:
    import csv

    from .checkpoint import CheckpointError, load_checkpoint
    from .downstream import assemble_from_checkpoint, evaluate, train_probe
    from .sample_io import Dataset

    config = _load_config(args.config, None)
    assembly = _parse_assembly(args.assembly)
    try:
        ckpt = load_checkpoint(Path(args.checkpoint))
        backbone, bank = assemble_from_checkpoint(ckpt, assembly)
    except (CheckpointError, KeyError) as e:
        print(f"checkpoint/assembly mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT

    dataset = Dataset(Path(args.data))
    n_classes = int(dataset.manifest["world_spec"]["num_classes"])

    with _TempOutput(Path(args.out)) as tmp:
        manifest = RunManifest.start("probe", args.out, args.config, config.hash(), config.seed)
        manifest.write(tmp)

        pc = config.probe
        result = train_probe(
            backbone, assembly, dataset, n_classes,
            lr=pc.lr, epochs=pc.epochs, batch_size=pc.batch_size,
            weight_decay=pc.weight_decay, seed=config.seed, bank=bank,
        )
        metrics, per_sample = evaluate(
            result.head, backbone, assembly, dataset, split="val", bank=bank, n_classes=n_classes
        )

        (tmp / "metrics.json").write_text(
            json.dumps({"assembly": assembly.name, **metrics.to_dict()}, indent=1, sort_keys=True) + "\n"
        )
        with (tmp / "metrics.csv").open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class_id", "tp", "fp", "fn", "iou"])
            for c in metrics.per_class:
                writer.writerow([c.class_id, c.tp, c.fp, c.fn, f"{c.iou:.6f}"])
            writer.writerow(["overall_accuracy", "", "", "", f"{metrics.overall_accuracy:.6f}"])
            writer.writerow(["mean_iou", "", "", "", f"{metrics.mean_iou:.6f}"])
        with (tmp / "predictions.jsonl").open("w") as f:
            from .downstream import majority_label, site_labels

            for sid, preds in per_sample.items():
                sample = dataset.load(sid)
                if assembly.head == "per-pixel-linear":
                    labels = site_labels(sample.label_map, backbone.grid).tolist()
                else:
                    labels = [majority_label(sample.label_map)]
                f.write(json.dumps({"sample_id": sid, "predictions": preds.tolist(),
                                    "labels": labels}) + "\n")

        from .checkpoint import save_checkpoint

        head_entries = {f"head/{k}": v for k, v in result.head.state_dict().items()}
        save_checkpoint(tmp / "head_checkpoint", ckpt.step, config.hash(), head_entries,
                        {"assembly": dataclasses.asdict(assembly)})
        manifest.finish(tmp)

    print(f"probe {assembly.name}: OA {metrics.overall_accuracy:.4f}, "
          f"mIoU {metrics.mean_iou:.4f}")
    return EXIT_OK


def cmd_viz_prototypes(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .downstream import TaskAssembly, assemble_from_checkpoint
    from .sample_io import Dataset
    from .viz import render_dataset_maps

    try:
        ckpt = load_checkpoint(Path(args.checkpoint))
        assembly = TaskAssembly(
            modalities=("HR", "Ms", "SAR"), use_fusion=True, use_geo_context=True
        )
        backbone, bank = assemble_from_checkpoint(ckpt, assembly)
    except (CheckpointError, KeyError) as e:
        print(f"checkpoint/assembly mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT

    dataset = Dataset(Path(args.data))
    with _TempOutput(Path(args.out)) as tmp:
        manifest = RunManifest.start("viz-prototypes", args.out)
        manifest.write(tmp)
        legend = render_dataset_maps(backbone, bank, dataset, tmp, split=args.split,
                                     limit=args.limit)
        manifest.finish(tmp)
    print(f"rendered prototype maps for {args.split or 'all'} split "
          f"({len(legend)} prototypes) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skysense-mini",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate a synthetic multi-modal dataset")
    p.add_argument("--config", required=True, help="YAML config; see docs/config.md")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="run teacher-student pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train and evaluate a linear probe on a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--assembly", required=True,
        help='JSON assembly spec or path to one, e.g. {"modalities": ["HR"], '
             '"use_fusion": false, "use_geo_context": false, "head": "per-pixel-linear"}',
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("viz-prototypes", help="render argmax prototype maps as PNG rasters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", help="dataset split to render (default val)")
    p.add_argument("--limit", type=int, default=None, help="cap the number of samples")
    p.set_defaults(func=cmd_viz_prototypes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap()
    try:
        return args.func(args)
    except SystemExit as e:  # config/assembly failures raised mid-command
        return int(e.code) if e.code is not None else 1


if __name__ == "__main__":
    sys.exit(main())
