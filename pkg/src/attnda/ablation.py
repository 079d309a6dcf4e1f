"""Named ablation grids, replicate seeding and the aggregated comparison table."""
from __future__ import annotations

import json
import logging
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig, apply_overrides, from_dict, to_dict
from .evaluation import format_table

log = logging.getLogger(__name__)

_OFF_ALL = {"disable_adv": True, "disable_pseudo": True, "disable_ac": True, "disable_as": True}

# each row: (label, dotted overrides)
GRIDS = {
    "components": [
        ("L_cls", {f"ablation.{k}": v for k, v in _OFF_ALL.items()}),
        ("+L_adv", {"ablation.disable_pseudo": True, "ablation.disable_ac": True, "ablation.disable_as": True}),
        ("+L_p", {"ablation.disable_ac": True, "ablation.disable_as": True}),
        ("+L_ac", {"ablation.disable_as": True}),
        ("+L_ac+L_as", {}),
    ],
    "transforms": [
        ("flip", {"transform.kind": "flip"}),
        ("rotation", {"transform.kind": "rotation"}),
        ("scaling", {"transform.kind": "scaling"}),
    ],
    "consistency": [
        ("attention consistency", {}),
        ("prediction consistency", {"ablation.use_prediction_consistency": True}),
    ],
    "confidence": [
        ("full", {}),
        ("ungated L_ac", {"ablation.ac_gate_all": True}),
        ("ungated L_as", {"ablation.as_gate_all": True}),
        ("no entropy weight", {"ablation.disable_entropy_weight": True}),
    ],
}

_SWEEP_KEYS = {"mu", "lam", "tau", "alpha", "beta_fraction"}


def parse_grid(spec: str) -> tuple[str, list]:
    """A named grid, or ``key=v1,v2,...`` for a value sweep (``mu=0.01,0.1`` or a dotted key)."""
    if spec in GRIDS:
        return spec, GRIDS[spec]
    if "=" not in spec:
        raise ValueError(f"unknown grid {spec!r}; choose one of {sorted(GRIDS)} or key=v1,v2,...")
    key, values = spec.split("=", 1)
    key = key.strip()
    dotted = f"regularizers.{key}" if key in _SWEEP_KEYS else key
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ValueError(f"grid {spec!r} lists no values")
    rows = []
    for text in items:
        value = apply_overrides({}, [f"v={text}"])["v"]
        rows.append((f"{key}={text}", {dotted: value}))
    return f"sweep-{key}", rows


def replicate_seed(base_seed: int, replicate: int) -> int:
    """Seed for one replicate; every grid row of that replicate shares it (paired comparison)."""
    return int(np.random.SeedSequence([base_seed, replicate]).generate_state(1)[0] % (2**31))


def cell_config(base: ExperimentConfig, overrides: dict, seed: int, out_dir: Path) -> ExperimentConfig:
    data = to_dict(base)
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    data["seed"] = seed
    data["output_dir"] = str(out_dir)
    return from_dict(data)


@dataclass
class CellResult:
    row: str
    replicate: int
    seed: int
    out_dir: str
    final: dict = field(default_factory=dict)
    error: Optional[str] = None


def run_cell(base: ExperimentConfig, overrides: dict, seed: int, out_dir: str, row: str,
             replicate: int) -> CellResult:
    """Train one grid cell; failures (bad values or aborted runs) are captured, never raised."""
    from .trainer import train

    try:
        cfg = cell_config(base, overrides, seed, Path(out_dir))
        result = train(cfg, out_dir=out_dir)
        return CellResult(row, replicate, seed, out_dir, dict(result.final))
    except Exception as exc:  # recorded so the remaining cells still run
        log.error("cell %s/%d failed: %s", row, replicate, exc)
        return CellResult(row, replicate, seed, out_dir, error="".join(
            traceback.format_exception_only(type(exc), exc)).strip())


def run_grid(base: ExperimentConfig, grid: str, replicates: int, out_dir, jobs: int = 1) -> list:
    """Run every (row, replicate) cell and write ``cells.jsonl`` and ``summary.txt``."""
    name, rows = parse_grid(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for r in range(replicates):
        seed = replicate_seed(base.seed, r)
        for i, (label, overrides) in enumerate(rows):
            cells.append((base, overrides, seed, str(out_dir / f"row{i}-rep{r}"), label, r))
    if jobs > 1:
        import multiprocessing

        with ProcessPoolExecutor(jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            results = list(pool.map(run_cell, *zip(*cells)))
    else:
        results = [run_cell(*c) for c in cells]
    order = {label: i for i, (label, _) in enumerate(rows)}
    results.sort(key=lambda c: (order[c.row], c.replicate))
    with open(out_dir / "cells.jsonl", "w") as fh:
        for c in results:
            fh.write(json.dumps(c.__dict__) + "\n")
    (out_dir / "summary.txt").write_text(ablation_table(results, [label for label, _ in rows], title=name))
    return results


def aggregate(results, labels) -> list:
    """Per-row means over successful replicates, in grid order."""
    out = []
    for label in labels:
        ok = [c for c in results if c.row == label and c.error is None]
        failed = sum(1 for c in results if c.row == label and c.error is not None)

        def mean(key):
            vals = [c.final[key] for c in ok if c.final.get(key) is not None]
            return statistics.fmean(vals) if vals else None

        def std(key):
            vals = [c.final[key] for c in ok if c.final.get(key) is not None]
            return statistics.pstdev(vals) if len(vals) > 1 else 0.0 if vals else None

        out.append({
            "row": label,
            "n": len(ok),
            "failed": failed,
            "target_acc": mean("target_acc"),
            "target_acc_std": std("target_acc"),
            "source_acc": mean("source_acc"),
            "mask_rate": mean("mask_rate"),
            "purity": mean("purity"),
            "consistency_score": mean("consistency_score"),
            "overlap_score": mean("overlap_score"),
        })
    return out


def _pct(v):
    return "-" if v is None else f"{100 * v:.1f}"


def ablation_table(results, labels, title: str = "") -> str:
    rows = []
    for a in aggregate(results, labels):
        acc = "-" if a["target_acc"] is None else f"{100 * a['target_acc']:.1f} ± {100 * a['target_acc_std']:.1f}"
        rows.append([
            a["row"], acc, _pct(a["source_acc"]), _pct(a["mask_rate"]), _pct(a["purity"]),
            "-" if a["consistency_score"] is None else f"{a['consistency_score']:.4f}",
            "-" if a["overlap_score"] is None else f"{a['overlap_score']:.3f}",
            f"{a['n']}" + (f" ({a['failed']} failed)" if a["failed"] else ""),
        ])
    header = ["setting", "target acc%", "source acc%", "mask%", "purity%", "consistency", "overlap", "runs"]
    table = format_table(header, rows, note="accuracy of the final iterate, mean ± std over replicates; "
                                            "consistency/overlap are constructed attention diagnostics (lower is better)")
    return (f"{title}\n\n" if title else "") + table


def read_cells(path) -> list:
    with open(path) as fh:
        return [CellResult(**json.loads(line)) for line in fh if line.strip()]
