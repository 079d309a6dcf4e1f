"""Class activation maps and the spatial transforms shared by images and maps.

Everything here operates on torch tensors and stays differentiable, so the
same functions serve the training losses and the diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

TRANSFORM_KINDS = ("flip", "rotation", "scaling")


@dataclass(frozen=True)
class TransformSpec:
    """A spatial transform applied to a target image and its attention maps.

    ``max_rotation`` bounds the uniform draw made by :meth:`draw`; the drawn
    angle lives in ``rotation_degrees`` and is reused for image and maps.
    """

    kind: str = "flip"
    rotation_degrees: float = 0.0
    max_rotation: float = 10.0
    scale_target: int = 24
    common_upscale: int = 42
    background: float = 0.0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {TRANSFORM_KINDS}")
        if abs(self.rotation_degrees) > self.max_rotation + 1e-12:
            raise ValueError(
                f"rotation_degrees={self.rotation_degrees} outside [-{self.max_rotation}, {self.max_rotation}]"
            )
        if self.scale_target < 1 or self.common_upscale < 1:
            raise ValueError("scale_target and common_upscale must be positive")

    def draw(self, rng: np.random.Generator) -> "TransformSpec":
        """Return a concrete per-sample spec (only rotation is random)."""
        if self.kind != "rotation":
            return self
        angle = float(rng.uniform(-self.max_rotation, self.max_rotation))
        return replace(self, rotation_degrees=angle)


SpecLike = Union[TransformSpec, Sequence[TransformSpec]]


def _per_sample(spec: SpecLike, n: int) -> list[TransformSpec]:
    if isinstance(spec, TransformSpec):
        return [spec] * n
    specs = list(spec)
    if len(specs) != n:
        raise ValueError(f"got {len(specs)} transform specs for {n} samples")
    kinds = {s.kind for s in specs}
    if len(kinds) > 1:
        raise ValueError(f"mixed transform kinds in one batch: {sorted(kinds)}")
    return specs


def compute_cam(feature_map: torch.Tensor, classifier_weights: torch.Tensor) -> torch.Tensor:
    """Per-class attention maps ``A_k = sum_j w_kj F_j``.

    ``feature_map`` is C x H x W or N x C x H x W; ``classifier_weights`` is K x C.
    Returns K x H x W (or N x K x H x W).
    """
    if classifier_weights.dim() != 2:
        raise ValueError(f"classifier weights must be K x C, got shape {tuple(classifier_weights.shape)}")
    if feature_map.dim() not in (3, 4):
        raise ValueError(f"feature map must be C x H x W or N x C x H x W, got {tuple(feature_map.shape)}")
    c = feature_map.shape[-3]
    if classifier_weights.shape[1] != c:
        raise ValueError(
            f"classifier has {classifier_weights.shape[1]} input channels but feature map has {c}"
        )
    return torch.einsum("kc,...chw->...khw", classifier_weights, feature_map)


def gradcam_from_gradients(features: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """Combine features and d(logit)/d(features) into a rectified Grad-CAM map.

    Shapes are (..., C, H, W); the result is (..., H, W).
    """
    if features.shape != gradients.shape:
        raise ValueError(f"shape mismatch: features {tuple(features.shape)} vs gradients {tuple(gradients.shape)}")
    weights = gradients.mean(dim=(-2, -1), keepdim=True)
    return torch.relu((weights * features).sum(dim=-3))


def gradcam_stack(features: torch.Tensor, logits: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Grad-CAM maps for every class: N x K x H x W.

    ``logits`` must have been computed from ``features`` inside the current graph.
    Samples do not interact through the head, so summing a class logit over the
    batch yields the per-sample gradients in one call.
    """
    maps = []
    for k in range(logits.shape[1]):
        (grad,) = torch.autograd.grad(
            logits[:, k].sum(), features, create_graph=create_graph, retain_graph=True
        )
        maps.append(gradcam_from_gradients(features, grad))
    return torch.stack(maps, dim=1)


def compute_gradcam(model, image: torch.Tensor, class_index: int) -> torch.Tensor:
    """Grad-CAM attention map (H x W) of one image for one class.

    ``model`` must expose ``features(x)`` and ``logits_from_features(F)``.
    """
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    feats = model.features(x)
    logits = model.logits_from_features(feats)
    k = int(class_index)
    if not 0 <= k < logits.shape[1]:
        raise ValueError(f"class_index {class_index} out of range for {logits.shape[1]} classes")
    (grad,) = torch.autograd.grad(logits[:, k].sum(), feats, create_graph=torch.is_grad_enabled())
    out = gradcam_from_gradients(feats, grad)
    return out[0] if single else out


def _rotate(x: torch.Tensor, degrees: torch.Tensor, background: float) -> torch.Tensor:
    # x: N x C x H x W, degrees: N. Bilinear resampling about the image centre.
    theta = degrees * (math.pi / 180.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(cos)
    h, w = x.shape[-2:]
    # affine_grid works in normalised coordinates; correct for non-square inputs
    ar = w / h
    mat = torch.stack(
        [
            torch.stack([cos, -sin / ar, zeros], dim=-1),
            torch.stack([sin * ar, cos, zeros], dim=-1),
        ],
        dim=1,
    ).to(x.dtype)
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    out = F.grid_sample(x - background, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out + background


def _apply(x: torch.Tensor, specs: list[TransformSpec], background: float, resize: bool) -> torch.Tensor:
    kind = specs[0].kind
    if kind == "flip":
        return torch.flip(x, dims=(-1,))
    if kind == "rotation":
        angles = torch.tensor([s.rotation_degrees for s in specs], dtype=torch.float64, device=x.device)
        if not torch.any(angles != 0):
            return x
        lead = x.shape[:-2]
        flat = x.reshape(lead[0], -1, *x.shape[-2:])
        return _rotate(flat, angles, background).reshape(x.shape)
    if not resize:
        return x
    size = specs[0].scale_target
    return resize_maps(x, size)


def resize_maps(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of the two trailing axes to ``size x size``."""
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.interpolate(flat, size=(size, size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, size, size)


def transform_image(image: torch.Tensor, spec: SpecLike) -> torch.Tensor:
    """Apply ``spec`` to an image (H x W, C x H x W) or a batch (N x C x H x W).

    For a batch, ``spec`` may be a list with one spec per sample.
    """
    if image.dim() < 2:
        raise ValueError("image must have at least two dimensions")
    if image.dim() <= 3:
        specs = _per_sample(spec, 1)
        x = image.reshape(1, -1, *image.shape[-2:])
        out = _apply(x, specs, specs[0].background, resize=True)
        return out.reshape(*image.shape[:-2], *out.shape[-2:])
    specs = _per_sample(spec, image.shape[0])
    return _apply(image, specs, specs[0].background, resize=True)


def transform_attention(attn: torch.Tensor, spec: SpecLike) -> torch.Tensor:
    """Apply ``spec`` to an attention stack (K x H x W or N x K x H x W).

    Flip and rotation move the maps exactly like the paired image (background
    0). For scaling the maps are brought to ``common_upscale`` so that they can
    be compared with the maps of the rescaled image; see :func:`align_pair`.
    """
    if attn.dim() not in (3, 4):
        raise ValueError(f"attention stack must be K x H x W or N x K x H x W, got {tuple(attn.shape)}")
    batched = attn.dim() == 4
    x = attn if batched else attn.unsqueeze(0)
    specs = _per_sample(spec, x.shape[0])
    if specs[0].kind == "scaling":
        out = resize_maps(x, specs[0].common_upscale)
    else:
        out = _apply(x, specs, 0.0, resize=False)
    return out if batched else out[0]


def align_pair(original: torch.Tensor, transformed_input_maps: torch.Tensor, spec: SpecLike):
    """Return ``(T(A), A_bar)`` ready for an element-wise comparison."""
    ta = transform_attention(original, spec)
    specs = _per_sample(spec, original.shape[0] if original.dim() == 4 else 1)
    if specs[0].kind == "scaling":
        abar = resize_maps(transformed_input_maps, specs[0].common_upscale)
    else:
        abar = transformed_input_maps
    if ta.shape != abar.shape:
        raise ValueError(f"attention shapes differ after alignment: {tuple(ta.shape)} vs {tuple(abar.shape)}")
    return ta, abar


def rectify(maps: torch.Tensor) -> torch.Tensor:
    return torch.clamp(maps, min=0.0)


def max_normalize(maps: torch.Tensor) -> torch.Tensor:
    """Rectify and scale each H x W map to a maximum of 1 (all-zero maps stay zero)."""
    r = rectify(maps)
    peak = r.amax(dim=(-2, -1), keepdim=True)
    safe = torch.where(peak > 0, peak, torch.ones_like(peak))
    return r / safe
