"""
Class activation maps and the flip consistency check
====================================================

Train the full objective briefly on the synthetic task, then look at where the
recogniser attends. For a GAP model the attention of class k is the feature
map weighted by row k of the classifier, so it costs one einsum.

Flip an image, compute its map, flip the map back: a model whose attention
follows the glyph gives nearly the same map twice. The consistency score is
the mean squared gap between the two (lower is better).
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from attnda.attention import TransformSpec, max_normalize, rectify, transform_attention, transform_image
from attnda.config import load_config
from attnda.evaluation import attention_consistency_score, attention_overlap_score
from attnda.trainer import load_domains, train

torch.set_num_threads(1)
cfg = load_config("configs/synth.toml", ["schedule.max_steps=600", "schedule.eval_interval=300"])
result = train(cfg, out_dir="runs/demo-attention")
model = result.state.model.eval()
print("target accuracy after 600 steps:", round(result.final["target_acc"], 3))

# a few target images, as the model would see them
target = load_domains(cfg).target_test
x = torch.from_numpy(target.images[:6])

with torch.no_grad():
    fm = model.features(x)
    probs = model.logits_from_features(fm).softmax(-1)
    pred = probs.argmax(-1)
    maps = model.attention(fm)                       # N x K x h x w
    own = maps[torch.arange(len(x)), pred]           # map of the predicted class

    flip = TransformSpec(kind="flip")
    maps_flipped = model.attention(model.features(transform_image(x, flip)))
    back = transform_attention(maps_flipped, flip)[torch.arange(len(x)), pred]

print("per-image gap between the map and its flipped-back twin:")
gap = (max_normalize(rectify(own)) - max_normalize(rectify(back))).pow(2).mean(dim=(-2, -1))
print([round(g, 4) for g in gap.tolist()])

print("consistency score on the target test split:",
      round(attention_consistency_score(model, target, flip), 4))
print("overlap score (top-1 vs runner-up map):", round(attention_overlap_score(model, target), 3))

fig, axes = plt.subplots(3, len(x), figsize=(1.4 * len(x), 4.4))
for i in range(len(x)):
    axes[0, i].imshow(x[i, 0], cmap="gray")
    axes[0, i].set_title(f"pred {pred[i].item()}", fontsize=8)
    axes[1, i].imshow(max_normalize(rectify(own))[i], cmap="magma")
    axes[2, i].imshow(max_normalize(rectify(back))[i], cmap="magma")
for ax in axes.flat:
    ax.axis("off")
fig.savefig("attention.png", dpi=120, bbox_inches="tight")
print("wrote attention.png (rows: image, map, flipped-back map)")
