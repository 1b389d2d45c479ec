"""Drive one pre-training step by hand and inspect every moving part.

Builds the teacher-student pair, pulls one batch through augmentation and
both branches, and prints each loss component before and after a few
steps. Ends with a checkpoint round-trip.

Run: python demos/02_pretrain_walkthrough.py   (about a minute on CPU)
"""

import tempfile
from pathlib import Path

import torch

from skysense_mini.config import load_config
from skysense_mini.pretrain import Pretrainer
from skysense_mini.sample_io import Dataset
from skysense_mini.synthetic import generate_dataset

torch.set_num_threads(2)

cfg = load_config(Path(__file__).parent.parent / "configs" / "tiny.yaml")

with tempfile.TemporaryDirectory() as tmp:
    data_dir = Path(tmp) / "data"
    generate_dataset(cfg.data.world_spec(cfg.seed), cfg.data.n_samples, data_dir)
    trainer = Pretrainer(cfg, Dataset(data_dir))

    # --- anatomy of one batch ------------------------------------------------
    samples = trainer.select_batch(step=0)
    print(f"batch of {len(samples)}: {[s.sample_id for s in samples]}")

    components, aux = trainer.compute_losses(samples, step=0)
    print("\nloss components at step 0:")
    for name in sorted(components):
        print(f"  {name:12s} {float(components[name].detach()):8.4f}")

    corr = aux["corrs"][0]
    print(f"\nview overlap for sample 0: {corr.n_overlap} of "
          f"{corr.grid[0] * corr.grid[1]} feature sites matched")

    # --- a few real steps ----------------------------------------------------
    print("\ntraining:")
    for step in range(cfg.pretrain.steps):
        record = trainer.train_step(step)
        print(f"  step {step}: total {record['loss_total']:7.3f}  "
              f"mgcl {record['loss_mgcl']:7.3f}  align {record['loss_align']:6.3f}  "
              f"lr {record['lr']:.2e}")

    # teacher follows the student by EMA; prototypes moved without gradients
    print(f"\nprototype bank norm after training: "
          f"{trainer.bank.prototypes.norm(dim=-1).mean():.3f}")

    # --- checkpoint round-trip -----------------------------------------------
    ckpt_dir = Path(tmp) / "ckpt"
    trainer.save(ckpt_dir, step=cfg.pretrain.steps)
    from skysense_mini.checkpoint import load_checkpoint

    ckpt = load_checkpoint(ckpt_dir)
    print(f"\ncheckpoint at step {ckpt.step}: {len(ckpt.entries)} entries, e.g.")
    for key in list(sorted(ckpt.entries))[:4]:
        print(f"  {key}  {ckpt.entries[key].shape}")
