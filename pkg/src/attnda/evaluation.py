"""Accuracy, pseudo-label diagnostics and attention-quality scores, plus report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .attention import TransformSpec, max_normalize
from .data import DatasetSplit
from .losses import RegularizerParams, attention_consistency_loss, select_class_maps, separability_sample, top2

METRIC_FIELDS = ("iteration", "split", "accuracy", "mask_rate", "purity", "consistency_score", "overlap_score", "n")


@dataclass
class MetricsRecord:
    iteration: int
    split: str
    accuracy: Optional[float]
    mask_rate: float
    purity: Optional[float]
    consistency_score: float
    overlap_score: float
    n: int

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


@dataclass
class Predictions:
    probabilities: torch.Tensor  # N x K
    attention: Optional[torch.Tensor] = None  # N x K x H x W, raw
    transformed_attention: Optional[torch.Tensor] = None


def _was_training(model):
    flag = model.training
    model.eval()
    return flag


@torch.no_grad()
def predict(model, split: DatasetSplit, batch_size: int = 256) -> torch.Tensor:
    """Class probabilities for every image of ``split`` in inference mode."""
    flag = _was_training(model)
    try:
        out = [model(torch.from_numpy(split.images[i : i + batch_size])) for i in range(0, len(split), batch_size)]
    finally:
        model.train(flag)
    return torch.cat(out) if out else torch.empty(0, model.spec.class_count)


def collect(model, split: DatasetSplit, spec: Optional[TransformSpec] = None, batch_size: int = 256, seed: int = 0):
    """Probabilities and attention stacks of the original and transformed images."""
    from .attention import transform_image

    flag = _was_training(model)
    rng = np.random.default_rng(seed)
    probs, attn, tattn = [], [], []
    try:
        for i in range(0, len(split), batch_size):
            x = torch.from_numpy(split.images[i : i + batch_size])
            with torch.enable_grad() if model.attention_kind == "gradcam" else torch.no_grad():
                fm = model.features(x)
                logits = model.logits_from_features(fm)
                probs.append(torch.softmax(logits, -1).detach())
                attn.append(model.attention(fm, logits, create_graph=False).detach())
                if spec is not None:
                    specs = [spec.draw(rng) for _ in range(len(x))]
                    xt = transform_image(x, specs)
                    fmt = model.features(xt)
                    tattn.append(model.attention(fmt, model.logits_from_features(fmt), create_graph=False).detach())
    finally:
        model.train(flag)
    return Predictions(torch.cat(probs), torch.cat(attn), torch.cat(tattn) if tattn else None)


# -- probability-level metrics (model-free) ----------------------------------


def accuracy_from_probs(probabilities, labels) -> float:
    if labels is None:
        raise ValueError("accuracy needs a labelled split")
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return float((probabilities.argmax(1) == labels).double().mean())


def mask_rate_from_probs(probabilities, tau: float) -> float:
    if len(probabilities) == 0:
        raise ValueError("mask rate of an empty split is undefined")
    return float((probabilities.max(1).values > tau).double().mean())


def purity_from_probs(probabilities, labels, tau: float) -> Optional[float]:
    if labels is None:
        raise ValueError("purity needs ground-truth labels")
    labels = torch.as_tensor(labels)
    conf = probabilities.max(1).values > tau
    if not bool(conf.any()):
        return None
    return float((probabilities.argmax(1)[conf] == labels[conf]).double().mean())


def consistency_from_maps(original, transformed, spec) -> float:
    # gate disabled: every sample counts
    params = RegularizerParams(tau=1.0)
    conf = torch.zeros(original.shape[0])
    return float(attention_consistency_loss(original, transformed, conf, params, spec, gate_all=True))


def overlap_from_maps(probabilities, attention) -> float:
    _, first, second = top2(probabilities)
    a1 = max_normalize(select_class_maps(attention, first))
    a2 = max_normalize(select_class_maps(attention, second))
    return float(separability_sample(a1, a2, torch.ones_like(a1)).mean())


# -- model-level API ------------------------------------------------------------


def accuracy(model, split: DatasetSplit) -> float:
    """Fraction of argmax predictions matching the labels."""
    if not split.has_labels:
        raise ValueError(f"split {split.name!r} has no labels")
    return accuracy_from_probs(predict(model, split), split.labels)


def mask_rate(model, split: DatasetSplit, tau: float) -> float:
    return mask_rate_from_probs(predict(model, split), tau)


def purity(model, split: DatasetSplit, tau: float) -> Optional[float]:
    """Pseudo-label precision above ``tau``; ``None`` when nothing passes the gate."""
    return purity_from_probs(predict(model, split), split.labels, tau)


def attention_consistency_score(model, split: DatasetSplit, spec: TransformSpec, seed: int = 0) -> float:
    """Mean over samples and classes of ||T(A_k) - A_bar_k|| / (H W); lower is better."""
    pred = collect(model, split, spec, seed=seed)
    return consistency_from_maps(pred.attention, pred.transformed_attention, _specs_for(spec, len(split), seed))


def _specs_for(spec: TransformSpec, n: int, seed: int):
    # replays the draws made in ``collect``
    rng = np.random.default_rng(seed)
    return [spec.draw(rng) for _ in range(n)]


def attention_overlap_score(model, split: DatasetSplit) -> float:
    """Mean unmasked overlap between top-1 and top-2 class maps; lower is better."""
    pred = collect(model, split, None)
    return overlap_from_maps(pred.probabilities, pred.attention)


def evaluate(model, split: DatasetSplit, tau: float, spec: TransformSpec, iteration: int = 0,
             seed: int = 0) -> MetricsRecord:
    """All diagnostics for one split from a single pass over the data."""
    pred = collect(model, split, spec, seed=seed)
    p = pred.probabilities
    return MetricsRecord(
        iteration=int(iteration),
        split=split.name,
        accuracy=accuracy_from_probs(p, split.labels) if split.has_labels else None,
        mask_rate=mask_rate_from_probs(p, tau),
        purity=purity_from_probs(p, split.labels, tau) if split.has_labels else None,
        consistency_score=consistency_from_maps(pred.attention, pred.transformed_attention,
                                                _specs_for(spec, len(split), seed)),
        overlap_score=overlap_from_maps(p, pred.attention),
        n=len(split),
    )


def tau_sweep(probabilities, labels, taus) -> list:
    """(tau, mask_rate, purity) rows for a fixed set of predictions."""
    return [(float(t), mask_rate_from_probs(probabilities, t),
             purity_from_probs(probabilities, labels, t) if labels is not None else None) for t in taus]


# -- reports --------------------------------------------------------------------


def _csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = r.as_row()
        writer.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v, pct=False):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100 * v:.1f}" if pct else f"{v:.4f}"
    return str(v)


def summary_table(records) -> str:
    header = ["iteration", "split", "acc%", "mask%", "purity%", "consistency", "overlap", "n"]
    rows = [
        [str(r.iteration), r.split, _fmt(r.accuracy, True), _fmt(r.mask_rate, True), _fmt(r.purity, True),
         _fmt(r.consistency_score), _fmt(r.overlap_score), str(r.n)]
        for r in records
    ]
    return format_table(header, rows, note="consistency/overlap are constructed attention diagnostics (lower is better)")


def format_table(header, rows, note: Optional[str] = None) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    if note:
        out += ["", note]
    return "\n".join(out) + "\n"


def emit_report(records, out_dir, plots: bool = False, loss_log=None) -> list:
    """Write metrics.csv, metrics.jsonl and summary.txt (plus optional plots)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    paths = []
    p = out_dir / "metrics.csv"
    p.write_text(_csv_text(records))
    paths.append(p)
    p = out_dir / "metrics.jsonl"
    p.write_text("".join(json.dumps(r.as_row()) + "\n" for r in records))
    paths.append(p)
    p = out_dir / "summary.txt"
    p.write_text(summary_table(records))
    paths.append(p)
    if plots:
        paths += _plots(records, out_dir, loss_log)
    return paths


def _plots(records, out_dir: Path, loss_log):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if loss_log:
        fig, ax = plt.subplots(figsize=(6, 4))
        its = [row["iteration"] for row in loss_log]
        for key in ("l_cls", "l_p", "l_adv", "l_ac", "l_as"):
            ax.plot(its, [row[key] for row in loss_log], label=key)
        ax.set_xlabel("iteration")
        ax.legend()
        p = out_dir / "loss_curves.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    by_split = {}
    for r in records:
        by_split.setdefault(r.split, []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rs in by_split.items():
        ax.plot([r.iteration for r in rs], [r.accuracy if r.accuracy is not None else np.nan for r in rs], label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("accuracy")
    ax.legend()
    p = out_dir / "accuracy.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    paths.append(p)
    return paths


def read_records(path) -> list:
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
