"""Alternating optimisation of (E, G) against D with the full regularised objective."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig, ScheduleConfig, save_config, to_dict
from .data import BatchStream, DatasetSplit, DomainPair, PairedBatch, load_split, make_synthetic_pair
from .evaluation import MetricsRecord, emit_report, evaluate
from .losses import (
    ABSTAIN,
    LossBundle,
    TrainingAbort,
    adversarial_loss,
    assign_pseudo_labels,
    attention_consistency_loss,
    attention_separability_loss,
    classification_loss,
    prediction_consistency_loss,
    pseudo_loss,
    select_class_maps,
    top2,
    total_objective,
)
from .models import Recognizer, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = (
    "iteration", "lr", "l_cls", "l_p", "l_adv", "l_ac", "l_as", "total", "n_confident",
    "mask_rate", "purity", "source_acc", "target_acc", "consistency_score", "overlap_score",
)


def lr_at(step: int, cfg: ScheduleConfig, max_steps: Optional[int] = None) -> float:
    """Annealed rate ``lr0 * (1 - step / T_max) ** power``."""
    t_max = max_steps if max_steps is not None else cfg.max_steps
    if not 0 <= step <= t_max:
        raise ValueError(f"step {step} outside [0, {t_max}]")
    return cfg.lr0 * (1.0 - step / t_max) ** cfg.power


@dataclass
class TrainState:
    model: Recognizer
    opt_main: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    iteration: int = 0
    best_target_acc: float = -1.0
    best_iteration: int = -1


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    records: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)
    state: Optional[TrainState] = None

    @property
    def final(self) -> dict:
        return self.log_rows[-1] if self.log_rows else {}


def make_state(cfg: ExperimentConfig, model: Optional[Recognizer] = None) -> TrainState:
    if model is None:
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.model)
    main, disc = model.param_groups()
    sc = cfg.schedule
    opt_main = torch.optim.SGD(main, lr=sc.lr0, momentum=sc.momentum, weight_decay=sc.weight_decay)
    opt_disc = torch.optim.SGD(disc, lr=sc.lr0, momentum=sc.momentum, weight_decay=sc.weight_decay)
    return TrainState(model, opt_main, opt_disc)


def _uses_target(cfg: ExperimentConfig) -> bool:
    a = cfg.ablation
    return not (a.disable_adv and a.disable_pseudo and _ac_off(cfg) and _as_off(cfg))


def _ac_off(cfg):
    return cfg.ablation.disable_ac or cfg.regularizers.mu == 0


def _as_off(cfg):
    return cfg.ablation.disable_as or cfg.regularizers.lam == 0


def compute_losses(model: Recognizer, batch: PairedBatch, cfg: ExperimentConfig, reverse: bool = True) -> LossBundle:
    """One forward pass over source, target and (when needed) transformed target images."""
    params, flags = cfg.regularizers, cfg.ablation
    need_target = _uses_target(cfg)
    need_transformed = need_target and not _ac_off(cfg)
    parts = [batch.source_images]
    if need_target:
        parts.append(batch.target_images)
    if need_transformed:
        parts.append(batch.target_transformed)
    sizes = [len(p) for p in parts]
    if len({tuple(p.shape[1:]) for p in parts}) == 1:
        fm_all = model.features(torch.cat(parts))
        fms = list(torch.split(fm_all, sizes))
    else:
        # the scaling transform changes the spatial size; it gets its own pass
        fm_all = model.features(torch.cat(parts[:-1]))
        fms = list(torch.split(fm_all, sizes[:-1])) + [model.features(parts[-1])]
    zs = [model.embed(f) for f in fms]
    logits = [model.head(z) for z in zs]
    probs = [torch.softmax(lg, -1) for lg in logits]

    zero = probs[0].sum() * 0.0
    l_cls = classification_loss(probs[0], batch.source_labels)
    l_p = l_adv = l_ac = l_as = zero
    counts = {"n_confident": 0}
    if need_target:
        pt = probs[1]
        pseudo = assign_pseudo_labels(pt, params.tau)
        conf, first, second = top2(pt)
        counts["n_confident"] = int((pseudo != ABSTAIN).sum())
        if not flags.disable_adv:
            l_adv = adversarial_loss(model.discriminate(zs[0], reverse), model.discriminate(zs[1], reverse))
        if not flags.disable_pseudo:
            l_p = pseudo_loss(pt, pseudo)
        need_maps = not _ac_off(cfg) and not flags.use_prediction_consistency or not _as_off(cfg)
        if need_maps:
            a_t = model.attention(fms[1], logits[1])
        if not _ac_off(cfg):
            if flags.use_prediction_consistency:
                l_ac = prediction_consistency_loss(probs[2], pseudo)
            else:
                a_tt = model.attention(fms[2], logits[2])
                l_ac = attention_consistency_loss(
                    a_t, a_tt, conf, params, batch.transform_specs,
                    gate_all=flags.ac_gate_all, distance=flags.ac_distance,
                )
        if not _as_off(cfg):
            l_as = attention_separability_loss(
                pt, select_class_maps(a_t, first), select_class_maps(a_t, second), params,
                gate_all=flags.as_gate_all, use_entropy_weight=not flags.disable_entropy_weight,
            )
    mu = 0.0 if _ac_off(cfg) else params.mu
    lam = 0.0 if _as_off(cfg) else params.lam
    return total_objective(l_cls, l_p, l_adv, l_ac, l_as, replace(params, mu=mu, lam=lam), counts)


def train_step(batch: PairedBatch, state: TrainState, cfg: ExperimentConfig, lr: float) -> LossBundle:
    """One update of (E, G) and one of D from a single backward pass."""
    model = state.model
    model.train()
    bundle = compute_losses(model, batch, cfg)
    for opt in (state.opt_main, state.opt_disc):
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
    bundle.backward_objective.backward()
    state.opt_main.step()
    state.opt_disc.step()
    state.iteration += 1
    return bundle


def load_domains(cfg: ExperimentConfig) -> DomainPair:
    """Resolve the configured datasets (errors surface before any training)."""
    d = cfg.data
    if d.kind == "synthetic":
        return make_synthetic_pair(cfg.seed, d.synthetic)
    size = d.image_size or cfg.model.image_size
    src = load_split(d.source_train, "train", "source", size, d.channels)
    tgt = load_split(d.target_train, "train", "target", size, d.channels)
    src_test = load_split(d.source_test, "test", "source", size, d.channels) if d.source_test else src
    tgt_test = load_split(d.target_test, "test", "target", size, d.channels) if d.target_test else tgt
    if src.class_count is not None and src.class_count != cfg.model.class_count:
        raise ValueError(f"source split has {src.class_count} classes, model.class_count={cfg.model.class_count}")
    return DomainPair(src, tgt, src_test, tgt_test)


class Trainer:
    """Owns the model, optimisers and logs of one run."""

    def __init__(self, cfg: ExperimentConfig, domains: Optional[DomainPair] = None, out_dir=None,
                 state: Optional[TrainState] = None):
        self.cfg = cfg
        self.domains = domains if domains is not None else load_domains(cfg)
        self.out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        src = self.domains.source
        steps_per_epoch = math.ceil(len(src) / cfg.batch_size)
        self.max_steps = cfg.schedule.epochs * steps_per_epoch if cfg.schedule.epochs > 0 else cfg.schedule.max_steps
        self.state = state if state is not None else make_state(cfg)
        if state is None:
            mean = src.images.mean(axis=(0, 2, 3))
            std = src.images.std(axis=(0, 2, 3)) + 1e-6
            self.state.model.input_mean.copy_(torch.from_numpy(mean))
            self.state.model.input_std.copy_(torch.from_numpy(std))
        background = float(src.images.mean())
        self.spec = replace(cfg.transform, background=background)
        aug = cfg.augment if cfg.use_augmentation else None
        self.stream = BatchStream(src, self.domains.target, cfg.batch_size, self.spec, cfg.seed, aug)
        self.records: list = []
        self.log_rows: list = []
        self._accum: dict = {}

    # -- checkpoints ------------------------------------------------------------
    def _extra(self):
        s = self.state
        return {
            "opt_main": s.opt_main.state_dict(),
            "opt_disc": s.opt_disc.state_dict(),
            "best_target_acc": s.best_target_acc,
            "best_iteration": s.best_iteration,
            "torch_rng": torch.get_rng_state(),
            "accum": dict(self._accum),
        }

    def save(self, name: str) -> Path:
        return save_checkpoint(self.out_dir / name, self.state.model, to_dict(self.cfg), self.state.iteration,
                               self._extra())

    @classmethod
    def resume(cls, path, cfg: ExperimentConfig, domains: Optional[DomainPair] = None, out_dir=None) -> "Trainer":
        model, payload = load_checkpoint(path, expect=cfg.model)
        state = make_state(cfg, model)
        extra = payload["extra"]
        state.opt_main.load_state_dict(extra["opt_main"])
        state.opt_disc.load_state_dict(extra["opt_disc"])
        state.iteration = payload["iteration"]
        state.best_target_acc = extra["best_target_acc"]
        state.best_iteration = extra["best_iteration"]
        torch.set_rng_state(extra["torch_rng"])
        trainer = cls(cfg, domains, out_dir, state)
        trainer._accum = dict(extra.get("accum", {}))
        log_path = trainer.out_dir / "train_log.jsonl"
        if log_path.exists():
            rows = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            trainer.log_rows = [r for r in rows if r["iteration"] <= state.iteration]
        metrics_path = trainer.out_dir / "metrics.jsonl"
        if metrics_path.exists():
            from .evaluation import read_records

            trainer.records = [r for r in read_records(metrics_path) if r.iteration <= state.iteration]
        return trainer

    # -- evaluation ---------------------------------------------------------------
    def evaluate_now(self) -> dict:
        model, it = self.state.model, self.state.iteration
        tau = self.cfg.regularizers.tau
        src_rec = evaluate(model, self.domains.source_test, tau, self.spec, it)
        tgt_rec = evaluate(model, self.domains.target_test, tau, self.spec, it)
        self.records += [src_rec, tgt_rec]
        n = max(self._accum.get("count", 0), 1)
        losses = {k: self._accum.get(k, 0.0) / n for k in ("l_cls", "l_p", "l_adv", "l_ac", "l_as", "total")}
        row = {
            "iteration": it,
            "lr": lr_at(min(it, self.max_steps), self.cfg.schedule, self.max_steps),
            **losses,
            "n_confident": self._accum.get("n_confident", 0) / n,
            "mask_rate": tgt_rec.mask_rate,
            "purity": tgt_rec.purity,
            "source_acc": src_rec.accuracy,
            "target_acc": tgt_rec.accuracy,
            "consistency_score": tgt_rec.consistency_score,
            "overlap_score": tgt_rec.overlap_score,
        }
        self._accum = {}
        self.log_rows.append(row)
        self._write_logs()
        return row

    def _write_logs(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "train_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.log_rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in LOG_FIELDS})
        (self.out_dir / "train_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in self.log_rows))
        emit_report(self.records, self.out_dir)

    # -- main loop ------------------------------------------------------------------
    def run(self, stop_at: Optional[int] = None) -> TrainResult:
        cfg, state = self.cfg, self.state
        sc = cfg.schedule
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.out_dir / "config.toml")
        last = self.out_dir / "checkpoint_last.pt"
        best = self.out_dir / "checkpoint_best.pt"
        end = self.max_steps if stop_at is None else min(stop_at, self.max_steps)
        t0 = time.time()
        while state.iteration < end:
            step = state.iteration
            torch.manual_seed(int(np.random.SeedSequence([cfg.seed, 3, step]).generate_state(1)[0]))
            batch = self.stream.batch(step)
            try:
                bundle = train_step(batch, state, cfg, lr_at(step, sc, self.max_steps))
            except TrainingAbort:
                log.error("aborting at step %d; last checkpoint kept at %s", step, last)
                raise
            for k, v in bundle.as_floats().items():
                self._accum[k] = self._accum.get(k, 0.0) + v
            self._accum["n_confident"] = self._accum.get("n_confident", 0) + bundle.counts.get("n_confident", 0)
            self._accum["count"] = self._accum.get("count", 0) + 1
            it = state.iteration
            if it % sc.eval_interval == 0 or it == self.max_steps:
                row = self.evaluate_now()
                acc = row["target_acc"]
                if acc is not None and acc > state.best_target_acc:
                    state.best_target_acc, state.best_iteration = acc, it
                    self.save(best.name)
                log.info("step %d/%d (%.0fs) src=%.3f tgt=%s", it, self.max_steps, time.time() - t0,
                         row["source_acc"], acc)
            if it % sc.checkpoint_interval == 0 or it == end:
                self.save(last.name)
        if not best.exists():
            self.save(best.name)
        return TrainResult(best, last, list(self.records), list(self.log_rows), state)


def train(cfg: ExperimentConfig, domains: Optional[DomainPair] = None, out_dir=None) -> TrainResult:
    """Run the full budget and return the best-by-target-accuracy checkpoint."""
    return Trainer(cfg, domains, out_dir).run()
