"""
A look at the synthetic glyph domains
=====================================

Every class is a handful of random strokes. The source domain draws them
thin and clean; the target domain draws the same prototypes thicker, noisier,
fainter and with stray clutter strokes. Nothing here needs real datasets.

Run with ``python demos/synthetic_domains.py``; it writes ``glyphs.png``.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from attnda.config import load_config
from attnda.data import make_synthetic_pair

cfg = load_config("configs/synth.toml")
domains = make_synthetic_pair(cfg.seed, cfg.data.synthetic)

# four splits, all N x 1 x 28 x 28 floats in [0, 1]
for split in domains:
    print(f"{split.name:28s} {split.images.shape}  mean pixel {split.images.mean():.3f}")

# the target labels exist only so we can score the model; the trainer only
# ever sees domains.target.unlabeled()
print("target labels hidden:", domains.target.unlabeled().labels is None)

# one example per class from each domain, source on top
classes = cfg.data.synthetic.classes
fig, axes = plt.subplots(2, classes, figsize=(classes, 2.3))
for row, split in enumerate((domains.source, domains.target)):
    for k in range(classes):
        i = int(np.flatnonzero(split.labels == k)[0])
        axes[row, k].imshow(split.images[i, 0], cmap="gray", vmin=0, vmax=1)
        axes[row, k].axis("off")
axes[0, 0].set_title("source", loc="left", fontsize=8)
axes[1, 0].set_title("target", loc="left", fontsize=8)
fig.savefig("glyphs.png", dpi=120, bbox_inches="tight")
print("wrote glyphs.png")
