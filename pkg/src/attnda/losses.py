"""Objectives for adversarial, pseudo-labelled adaptation with attention regularizers.

All losses take probabilities (not logits) and return 0-dim tensors. Gated
terms use the strict confidence test ``max p > tau`` and evaluate to exactly
zero when nothing passes the gate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .attention import SpecLike, align_pair, max_normalize, rectify

ABSTAIN = -1
LOG_EPS = 1e-12
DENOM_EPS = 1e-12


class TrainingAbort(RuntimeError):
    """Raised when a loss component is not finite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r} (value={value})")
        self.component = component
        self.value = value


@dataclass(frozen=True)
class RegularizerParams:
    tau: float = 0.85
    mu: float = 0.1
    lam: float = 0.2
    alpha: float = 100.0
    beta_fraction: float = 0.55

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.tau <= 1.0:
            problems.append(f"tau={self.tau} must lie in [0, 1]")
        if self.mu < 0 or self.lam < 0:
            problems.append("mu and lam must be >= 0")
        if self.alpha <= 0:
            problems.append(f"alpha={self.alpha} must be > 0")
        if not 0.0 < self.beta_fraction < 1.0:
            problems.append(f"beta_fraction={self.beta_fraction} must lie in (0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def digits(cls) -> "RegularizerParams":
        return cls(tau=0.95, mu=0.3, lam=0.005)


@dataclass
class PredictionRecord:
    probabilities: list[float]
    pseudo_label: int
    confusing_label: int
    confidence: float
    entropy: float


@dataclass
class LossBundle:
    l_cls: torch.Tensor
    l_p: torch.Tensor
    l_adv: torch.Tensor
    l_ac: torch.Tensor
    l_as: torch.Tensor
    mu: float
    lam: float
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return self.l_cls + self.l_p + self.l_adv + self.mu * self.l_ac + self.lam * self.l_as

    @property
    def backward_objective(self) -> torch.Tensor:
        """Scalar to backpropagate when the discriminator sits behind a reversal boundary.

        The discriminator must ascend ``l_adv`` while the extractor descends it.
        Descending ``-l_adv`` does the former; the boundary flips the sign again
        on the way into the extractor, which then descends ``+l_adv``.
        """
        return self.l_cls + self.l_p - self.l_adv + self.mu * self.l_ac + self.lam * self.l_as

    def as_floats(self) -> dict:
        out = {name: float(getattr(self, name).detach()) for name in ("l_cls", "l_p", "l_adv", "l_ac", "l_as")}
        out["total"] = float(self.total.detach())
        return out


def _check_probs(probabilities: torch.Tensor):
    if probabilities.dim() != 2:
        raise ValueError(f"probabilities must be N x K, got shape {tuple(probabilities.shape)}")


def classification_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy ``-log p[label]`` over the batch."""
    _check_probs(probabilities)
    if probabilities.shape[0] == 0:
        raise ValueError("classification_loss needs a non-empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long, device=probabilities.device)
    if labels.shape != probabilities.shape[:1]:
        raise ValueError("labels must have one entry per sample")
    k = probabilities.shape[1]
    if bool((labels < 0).any()) or bool((labels >= k).any()):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = probabilities.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_EPS)).mean()


def top2(probabilities: torch.Tensor):
    """(confidence, argmax, second-best index); ties resolve to the lowest index."""
    _check_probs(probabilities)
    if probabilities.shape[1] < 2:
        raise ValueError("need at least two classes")
    # stable descending sort keeps the lowest index first among equal values
    order = torch.sort(probabilities.detach(), dim=1, descending=True, stable=True).indices
    first, second = order[:, 0], order[:, 1]
    conf = probabilities.detach().gather(1, first[:, None]).squeeze(1)
    return conf, first, second


def assign_pseudo_labels(probabilities: torch.Tensor, tau: float) -> torch.Tensor:
    """Argmax where ``max p > tau`` (strict), else :data:`ABSTAIN`."""
    _check_probs(probabilities)
    p = probabilities.detach()
    # argmax returns the first maximal index
    first = p.argmax(dim=1)
    conf = p.gather(1, first[:, None]).squeeze(1)
    return torch.where(conf > tau, first, torch.full_like(first, ABSTAIN))


def pseudo_loss(probabilities: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over samples that did not abstain (0 if all abstain)."""
    _check_probs(probabilities)
    pseudo_labels = torch.as_tensor(pseudo_labels, dtype=torch.long, device=probabilities.device)
    keep = pseudo_labels != ABSTAIN
    if not bool(keep.any()):
        return probabilities.sum() * 0.0
    picked = probabilities[keep].gather(1, pseudo_labels[keep][:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_EPS)).mean()


def adversarial_loss(domain_scores_source: torch.Tensor, domain_scores_target: torch.Tensor) -> torch.Tensor:
    """``mean log D(source) + mean log(1 - D(target))``; scores are P(source)."""
    s = domain_scores_source.reshape(-1).clamp(LOG_EPS, 1 - LOG_EPS)
    t = domain_scores_target.reshape(-1).clamp(LOG_EPS, 1 - LOG_EPS)
    return torch.log(s).mean() + torch.log(1 - t).mean()


def attention_consistency_loss(
    original: torch.Tensor,
    transformed_input_maps: torch.Tensor,
    confidences: torch.Tensor,
    params: RegularizerParams,
    spec: SpecLike,
    gate_all: bool = False,
    distance: str = "l2",
) -> torch.Tensor:
    """Distance between ``T(A)`` and the maps of the transformed image.

    ``original`` and ``transformed_input_maps`` are N x K x H x W raw stacks;
    both are rectified first. With ``distance="l2"`` each class map contributes
    its Euclidean norm and the sum is divided by N*K*H*W. ``distance="mse"``
    uses the squared norm instead. ``gate_all`` drops the confidence gate.
    """
    if original.dim() != 4 or transformed_input_maps.dim() != 4:
        raise ValueError("attention stacks must be N x K x H x W")
    if original.shape[:2] != transformed_input_maps.shape[:2]:
        raise ValueError(
            f"stack shapes differ: {tuple(original.shape)} vs {tuple(transformed_input_maps.shape)}"
        )
    n = original.shape[0]
    confidences = torch.as_tensor(confidences, device=original.device).reshape(-1)
    if confidences.shape[0] != n:
        raise ValueError("need one confidence per sample")
    ta, abar = align_pair(rectify(original), rectify(transformed_input_maps), spec)
    _, k, h, w = ta.shape
    diff = (ta - abar).reshape(n, k, h * w)
    if distance == "l2":
        per_map = torch.linalg.vector_norm(diff, dim=-1)
    elif distance == "mse":
        per_map = (diff * diff).sum(dim=-1)
    else:
        raise ValueError(f"unknown distance {distance!r}")
    gate = torch.ones_like(confidences, dtype=per_map.dtype) if gate_all else (confidences > params.tau).to(per_map.dtype)
    return (gate[:, None] * per_map).sum() / (n * k * h * w)


def foreground_mask(a_pd: torch.Tensor, alpha: float, beta_fraction: float) -> torch.Tensor:
    """Sigmoid mask ``1 / (1 + exp(-alpha (A - beta_fraction * max A)))`` per map."""
    beta = beta_fraction * a_pd.amax(dim=(-2, -1), keepdim=True)
    return torch.sigmoid(alpha * (a_pd - beta))


def separability_sample(a_pd: torch.Tensor, a_cf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked overlap ``2 sum(min(A_pd, A_cf) M) / sum(A_pd + A_cf)``, per leading index."""
    if a_pd.shape != a_cf.shape or a_pd.shape != mask.shape:
        raise ValueError("a_pd, a_cf and mask must share a shape")
    # ties send the gradient to the first argument
    overlap = torch.where(a_pd <= a_cf, a_pd, a_cf)
    num = 2.0 * (overlap * mask).sum(dim=(-2, -1))
    den = (a_pd + a_cf).sum(dim=(-2, -1)).clamp_min(DENOM_EPS)
    return num / den


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Natural-log entropy along the last axis with ``0 log 0 = 0``."""
    return -(p * torch.log(p.clamp_min(LOG_EPS))).sum(dim=-1)


def entropy_weight(p: torch.Tensor) -> torch.Tensor:
    """``1 + exp(-H(p))``; 2 for one-hot, 1 + 1/K for uniform."""
    return 1.0 + torch.exp(-entropy(p))


def attention_separability_loss(
    probabilities: torch.Tensor,
    pd_maps: torch.Tensor,
    cf_maps: torch.Tensor,
    params: RegularizerParams,
    gate_all: bool = False,
    use_entropy_weight: bool = True,
) -> torch.Tensor:
    """Entropy-weighted, confidence-gated separability over a target batch.

    ``pd_maps[i]`` / ``cf_maps[i]`` are the raw H x W maps of the top-1 and
    top-2 classes of sample i. Maps are rectified and max-normalised before
    the mask and overlap are formed.
    """
    _check_probs(probabilities)
    n = probabilities.shape[0]
    if pd_maps.shape[0] != n or cf_maps.shape[0] != n:
        raise ValueError("need one pd/cf map per sample")
    a_pd = max_normalize(pd_maps)
    a_cf = max_normalize(cf_maps)
    mask = foreground_mask(a_pd, params.alpha, params.beta_fraction)
    per_sample = separability_sample(a_pd, a_cf, mask)
    if use_entropy_weight:
        per_sample = entropy_weight(probabilities) * per_sample
    if gate_all:
        gate = torch.ones(n, dtype=per_sample.dtype, device=per_sample.device)
    else:
        conf = probabilities.detach().max(dim=1).values
        gate = (conf > params.tau).to(per_sample.dtype)
    return (gate * per_sample).sum() / n


def select_class_maps(stack: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Pick ``stack[i, indices[i]]`` from an N x K x H x W stack."""
    idx = indices.reshape(-1, 1, 1, 1).expand(-1, 1, *stack.shape[-2:])
    return stack.gather(1, idx).squeeze(1)


def prediction_consistency_loss(transformed_probabilities: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between pseudo labels of the original images and predictions on T(x)."""
    return pseudo_loss(transformed_probabilities, pseudo_labels)


def total_objective(
    l_cls: torch.Tensor,
    l_p: torch.Tensor,
    l_adv: torch.Tensor,
    l_ac: torch.Tensor,
    l_as: torch.Tensor,
    params: RegularizerParams,
    counts: Optional[dict] = None,
) -> LossBundle:
    """Bundle the components; raises :class:`TrainingAbort` on any non-finite term."""
    parts = {"l_cls": l_cls, "l_p": l_p, "l_adv": l_adv, "l_ac": l_ac, "l_as": l_as}
    for name, value in parts.items():
        v = float(torch.as_tensor(value).detach())
        if not math.isfinite(v):
            raise TrainingAbort(name, v)
    parts = {k: torch.as_tensor(v) for k, v in parts.items()}
    return LossBundle(**parts, mu=params.mu, lam=params.lam, counts=dict(counts or {}))


def prediction_records(probabilities: torch.Tensor, tau: float) -> list[PredictionRecord]:
    """Per-sample summaries for logging and inspection."""
    p = probabilities.detach()
    conf, first, second = top2(p)
    ent = entropy(p)
    return [
        PredictionRecord(
            probabilities=p[i].tolist(),
            pseudo_label=int(first[i]) if float(conf[i]) > tau else ABSTAIN,
            confusing_label=int(second[i]),
            confidence=float(conf[i]),
            entropy=float(ent[i]),
        )
        for i in range(p.shape[0])
    ]
