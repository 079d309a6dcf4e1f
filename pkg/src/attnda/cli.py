"""Command line: ``attnda train | eval | ablate | report``.

Exit status is 0 on success, 1 when the configuration or inputs fail
validation, and 2 when a run aborts at runtime. Relative output directories
are resolved under ``$ATTNDA_OUTPUT_ROOT`` when that variable is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

OUTPUT_ROOT_ENV = "ATTNDA_OUTPUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
DEFAULT_TAUS = (0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95)
SPLITS = ("source_test", "target_test", "source", "target")

log = logging.getLogger("attnda")


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return path if path.is_absolute() or not root else Path(root) / path


def _final_line(row: dict) -> str:
    keys = ("iteration", "source_acc", "target_acc", "mask_rate", "purity", "consistency_score", "overlap_score")
    return "final " + " ".join(f"{k}={row.get(k)}" for k in keys)


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    from .config import load_config, with_updates
    from .trainer import Trainer

    cfg = load_config(args.config, args.set)
    out_dir = resolve_output(args.output_dir or cfg.output_dir)
    cfg = with_updates(cfg, output_dir=str(out_dir))
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg, out_dir=out_dir)
    else:
        trainer = Trainer(cfg, out_dir=out_dir)
    result = trainer.run()
    print(_final_line(result.final))
    print(f"checkpoints: {result.best_checkpoint} {result.last_checkpoint}")
    return EXIT_OK


def _load_eval_inputs(args):
    from .config import from_dict, load_config
    from .models import load_checkpoint

    if args.config:
        cfg = load_config(args.config, args.set)
        model, payload = load_checkpoint(args.checkpoint, expect=cfg.model)
    else:
        model, payload = load_checkpoint(args.checkpoint)
        from .config import apply_overrides

        cfg = from_dict(apply_overrides(payload["config"], args.set))
    return cfg, model, payload


def _resolve_split(args, cfg):
    """The split to score and the rotation background (mean source pixel, as in training)."""
    from .data import load_split
    from .trainer import load_domains

    if args.data:
        domain = "source" if args.split.startswith("source") else "target"
        size = cfg.data.image_size or cfg.model.image_size
        split = load_split(args.data, "test", domain, size, cfg.data.channels)
        return split, float(split.images.mean())
    domains = load_domains(cfg)
    split = {
        "source_test": domains.source_test,
        "target_test": domains.target_test,
        "source": domains.source,
        "target": domains.target,
    }[args.split]
    return split, float(domains.source.images.mean())


def cmd_eval(args) -> int:
    from dataclasses import replace

    from .evaluation import emit_report, evaluate, format_table, predict, tau_sweep

    cfg, model, payload = _load_eval_inputs(args)
    split, background = _resolve_split(args, cfg)
    spec = replace(cfg.transform, background=background)
    record = evaluate(model, split, cfg.regularizers.tau, spec, payload["iteration"], seed=cfg.seed)
    out_dir = resolve_output(args.out or Path(args.checkpoint).parent / f"eval-{args.split}")
    emit_report([record], out_dir)
    print(format_table(["field", "value"], [[k, "-" if v is None else str(v)] for k, v in record.as_row().items()]))
    if args.tau:
        rows = tau_sweep(predict(model, split), split.labels, args.tau)
        with open(out_dir / "tau_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", "mask_rate", "purity"])
            for t, m, p in rows:
                w.writerow([t, repr(m), "" if p is None else repr(p)])
        print(format_table(["tau", "mask%", "purity%"],
                           [[f"{t:.2f}", f"{100 * m:.1f}", "-" if p is None else f"{100 * p:.1f}"] for t, m, p in rows]))
        if args.plots:
            _tau_plot(rows, out_dir)
    print(f"wrote {out_dir}")
    return EXIT_OK


def _tau_plot(rows, out_dir: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    taus = [r[0] for r in rows]
    ax.plot(taus, [r[1] for r in rows], marker="o", label="mask rate")
    ax.plot(taus, [r[2] if r[2] is not None else float("nan") for r in rows], marker="s", label="purity")
    ax.set_xlabel("tau")
    ax.legend()
    fig.savefig(out_dir / "tau_sweep.png", dpi=100)
    plt.close(fig)


def cmd_ablate(args) -> int:
    from .ablation import parse_grid, run_grid
    from .config import load_config, with_updates

    cfg = load_config(args.config, args.set)
    name, _ = parse_grid(args.grid)  # fail fast on a malformed grid
    if args.seed is not None:
        cfg = with_updates(cfg, seed=args.seed)
    out_dir = resolve_output(args.output_dir or Path(cfg.output_dir) / f"ablate-{name}")
    results = run_grid(cfg, args.grid, args.replicates, out_dir, jobs=args.jobs)
    print((out_dir / "summary.txt").read_text())
    failed = [c for c in results if c.error]
    for c in failed:
        print(f"cell {c.row} replicate {c.replicate} failed: {c.error}", file=sys.stderr)
    return EXIT_ABORT if failed else EXIT_OK


def cmd_report(args) -> int:
    from .ablation import ablation_table, read_cells
    from .evaluation import emit_report, read_records, summary_table

    status = EXIT_OK
    for run in args.runs:
        run = resolve_output(run)
        cells, metrics = run / "cells.jsonl", run / "metrics.jsonl"
        if cells.exists():
            results = read_cells(cells)
            labels = list(dict.fromkeys(c.row for c in results))
            text = ablation_table(results, labels, title=run.name)
        elif metrics.exists():
            records = read_records(metrics)
            log_path = run / "train_log.jsonl"
            loss_log = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()] if log_path.exists() else None
            emit_report(records, run, plots=args.plots, loss_log=loss_log)
            text = f"{run.name}\n\n" + summary_table(records)
        else:
            print(f"{run}: no cells.jsonl or metrics.jsonl found", file=sys.stderr)
            status = EXIT_INVALID
            continue
        (run / "summary.txt").write_text(text)
        print(text)
    return status


# -- parser -------------------------------------------------------------------


def _taus(text: str):
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=True):
        p.add_argument("--config", required=required, help="TOML experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted key, TOML literal value); repeatable")

    p = sub.add_parser("train", help="train one model")
    config_args(p)
    p.add_argument("--output-dir", help="run directory (default: output_dir from the config)")
    p.add_argument("--resume", help="continue from a checkpoint_last.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    config_args(p, required=False)
    p.add_argument("--split", choices=SPLITS, default="target_test")
    p.add_argument("--data", help="evaluate on this dataset directory instead of the configured split")
    p.add_argument("--tau", type=_taus, nargs="?", const=list(DEFAULT_TAUS),
                   help="comma-separated thresholds for a mask-rate/purity sweep (default list if empty)")
    p.add_argument("--out", help="output directory for the metric files")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid over several replicates")
    config_args(p)
    p.add_argument("--grid", required=True,
                   help="components | transforms | consistency | confidence | KEY=v1,v2,... (e.g. mu=0.01,0.1,1.0)")
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--seed", type=int, help="base seed (default: seed from the config)")
    p.add_argument("--jobs", type=int, default=1, help="run isolated cells in this many processes")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render tables (and plots) for finished runs")
    p.add_argument("runs", nargs="+", help="train or ablate output directories")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import DatasetError
    from .losses import TrainingAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAbort, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
