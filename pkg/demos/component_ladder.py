"""
Adding one loss at a time
=========================

The ``components`` grid trains five models on the same data and seed: class
loss only, then the adversarial term, pseudo-labels, attention consistency,
and finally attention separability. This is a shortened run (one replicate,
800 steps) so it finishes in a few minutes on a laptop CPU; the full version
is ``attnda ablate --config configs/synth.toml --grid components``.
"""
import torch

from attnda.ablation import GRIDS, ablation_table, run_grid
from attnda.config import load_config

torch.set_num_threads(1)
cfg = load_config("configs/synth.toml", ["schedule.max_steps=800", "schedule.eval_interval=400"])

for label, overrides in GRIDS["components"]:
    print(f"{label:12s} {overrides}")

results = run_grid(cfg, "components", replicates=1, out_dir="runs/demo-ladder")
print()
print(ablation_table(results, [label for label, _ in GRIDS["components"]], title="components, 800 steps"))
