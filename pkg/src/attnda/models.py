"""Extractor / classifier / discriminator networks and the checkpoint format."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .attention import compute_cam, gradcam_stack

EXTRACTOR_KINDS = ("tiny-cnn", "lenet-like", "resnet18-like")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    extractor_kind: str = "tiny-cnn"
    class_count: int = 10
    in_channels: int = 1
    image_size: int = 28
    # tiny-cnn widths; the last entry is the feature channel count C
    widths: tuple = (8, 16, 32)
    disc_hidden: Optional[int] = None
    dropout: float = 0.5
    batch_norm: bool = True
    pretrained_weights_path: Optional[str] = None
    reversal_coefficient: float = 1.0

    def __post_init__(self):
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor_kind {self.extractor_kind!r}; expected one of {EXTRACTOR_KINDS}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.reversal_coefficient < 0:
            raise ValueError("reversal_coefficient must be >= 0")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def discriminator_hidden(self) -> int:
        if self.disc_hidden is not None:
            return self.disc_hidden
        return {"resnet18-like": 1024, "lenet-like": 100, "tiny-cnn": 100}[self.extractor_kind]


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


class ReversalBoundary(nn.Module):
    """Identity forward; multiplies the incoming gradient by ``-coefficient``."""

    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        if coefficient < 0:
            raise ValueError("coefficient must be >= 0")
        self.coefficient = float(coefficient)

    def forward(self, x):
        return _GradientReversal.apply(x, self.coefficient)


def global_average_pool(fm: torch.Tensor) -> torch.Tensor:
    """Mean over the two spatial axes: (..., C, H, W) -> (..., C)."""
    return fm.mean(dim=(-2, -1))


class Discriminator(nn.Module):
    """Two hidden layers with ReLU and dropout, sigmoid output = P(source)."""

    def __init__(self, in_features: int, hidden: int, dropout: float = 0.5):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z)).squeeze(-1)


def _conv_block(cin, cout, bn, pool):
    layers = [nn.Conv2d(cin, cout, 3, padding=1)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU())
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


class TinyCNN(nn.Module):
    """Conv blocks with 2x pooling after all but the last; output C x S/4 x S/4."""

    def __init__(self, in_channels=1, widths=(8, 16, 32), batch_norm=True):
        super().__init__()
        layers = []
        cin = in_channels
        for i, w in enumerate(widths):
            layers += _conv_block(cin, w, batch_norm, pool=i < len(widths) - 1)
            cin = w
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class LeNetExtractor(nn.Module):
    """LeNet convolution trunk: 28x28 -> 50 x 4 x 4, 32x32 -> 50 x 5 x 5."""

    def __init__(self, in_channels=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, 20, 5),
            nn.MaxPool2d(2),
            nn.ReLU(),
            nn.Conv2d(20, 50, 5),
            nn.Dropout2d(0.5),
            nn.MaxPool2d(2),
            nn.ReLU(),
        )
        self.out_channels = 50

    def forward(self, x):
        return self.body(x)


class ResNet18Extractor(nn.Module):
    """torchvision ResNet-18 trunk without pooling/fc: 224x224 -> 512 x 7 x 7."""

    def __init__(self, in_channels=3, weights_path=None):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            net.load_state_dict(state, strict=False)
        if in_channels != 3:
            old = net.conv1
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
            with torch.no_grad():
                net.conv1.weight.copy_(old.weight.mean(dim=1, keepdim=True).repeat(1, in_channels, 1, 1))
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.out_channels = 512

    def forward(self, x):
        return self.body(x)


class Recognizer(nn.Module):
    """Extractor E, classifier G and discriminator D behind one interface.

    ``features -> embed -> head`` gives the logits; ``embed`` also feeds the
    discriminator. For GAP models the head is a bias-free linear layer whose
    weight doubles as the CAM weight. The lenet-like model has no GAP, so its
    attention is Grad-CAM on the last convolution.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        kind = spec.extractor_kind
        if kind == "tiny-cnn":
            self.extractor = TinyCNN(spec.in_channels, spec.widths, spec.batch_norm)
        elif kind == "lenet-like":
            self.extractor = LeNetExtractor(spec.in_channels)
        else:
            self.extractor = ResNet18Extractor(spec.in_channels, spec.pretrained_weights_path)
        c = self.extractor.out_channels
        self.feature_channels = c
        if kind == "lenet-like":
            side = ((spec.image_size - 4) // 2 - 4) // 2
            self.bottleneck = nn.Sequential(nn.Flatten(), nn.Linear(c * side * side, 500), nn.ReLU(), nn.Dropout(0.5))
            embed_dim = 500
            self.classifier = nn.Linear(embed_dim, spec.class_count)
            self.attention_kind = "gradcam"
        else:
            self.bottleneck = None
            embed_dim = c
            self.classifier = nn.Linear(c, spec.class_count, bias=False)
            self.attention_kind = "cam"
        self.embed_dim = embed_dim
        self.discriminator = Discriminator(embed_dim, spec.discriminator_hidden, spec.dropout)
        self.reversal = ReversalBoundary(spec.reversal_coefficient)
        self.register_buffer("input_mean", torch.zeros(spec.in_channels))
        self.register_buffer("input_std", torch.ones(spec.in_channels))

    # -- E ------------------------------------------------------------------
    def normalize(self, x):
        return (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)

    def features(self, x):
        """Feature maps (N x C x H x W) of raw images in [0, 1]."""
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected N x {self.spec.in_channels} x H x W images, got {tuple(x.shape)}")
        if self.spec.extractor_kind != "tiny-cnn" and tuple(x.shape[-2:]) != (self.spec.image_size,) * 2:
            raise ValueError(
                f"{self.spec.extractor_kind} expects {self.spec.image_size}x{self.spec.image_size} inputs, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        if self.spec.extractor_kind == "tiny-cnn" and min(x.shape[-2:]) < 2 ** (len(self.spec.widths) - 1):
            raise ValueError(f"image of size {tuple(x.shape[-2:])} too small for tiny-cnn")
        return self.extractor(self.normalize(x))

    def embed(self, fm):
        if self.bottleneck is None:
            return global_average_pool(fm)
        return self.bottleneck(fm)

    # -- G ------------------------------------------------------------------
    @property
    def class_weights(self) -> torch.Tensor:
        return self.classifier.weight

    def head(self, z):
        return self.classifier(z)

    def logits_from_features(self, fm):
        return self.head(self.embed(fm))

    def classify(self, z):
        """Softmax class probabilities for embedded vectors."""
        return torch.softmax(self.head(z), dim=-1)

    def forward(self, x):
        return torch.softmax(self.logits_from_features(self.features(x)), dim=-1)

    def attention(self, fm, logits=None, create_graph=True):
        """N x K x H x W attention stack (raw CAM, or rectified Grad-CAM)."""
        if self.attention_kind == "cam":
            return compute_cam(fm, self.class_weights)
        if logits is None:
            logits = self.logits_from_features(fm)
        return gradcam_stack(fm, logits, create_graph=create_graph)

    # -- D ------------------------------------------------------------------
    def discriminate(self, z, reverse: bool = True):
        """P(source) for embedded vectors; ``reverse`` inserts the reversal boundary."""
        if reverse:
            z = self.reversal(z)
        return self.discriminator(z)

    def param_groups(self):
        main = [p for n, p in self.named_parameters() if not n.startswith("discriminator.")]
        return main, list(self.discriminator.parameters())


def build_model(spec: ModelSpec) -> Recognizer:
    return Recognizer(spec)


def save_checkpoint(path, model: Recognizer, config: dict, iteration: int, extra: Optional[dict] = None) -> Path:
    """Write a self-describing archive of named parameter arrays plus run metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    groups = {"extractor": {}, "classifier": {}, "discriminator": {}}
    for name, tensor in state.items():
        if name.startswith("discriminator."):
            groups["discriminator"][name] = tensor.clone()
        elif name.startswith("extractor.") or name.startswith("input_"):
            groups["extractor"][name] = tensor.clone()
        else:
            groups["classifier"][name] = tensor.clone()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_spec": asdict(model.spec),
        "config": config,
        "iteration": int(iteration),
        "params": groups,
        "shapes": {name: list(t.shape) for name, t in state.items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect: Optional[ModelSpec] = None):
    """Return ``(model, payload)``; ``expect`` guards against K / C mismatches."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    spec_dict = dict(payload["model_spec"])
    spec_dict["widths"] = tuple(spec_dict["widths"])
    spec = ModelSpec(**spec_dict)
    if expect is not None:
        if expect.class_count != spec.class_count:
            raise ValueError(f"checkpoint has K={spec.class_count} classes, configuration expects K={expect.class_count}")
        if expect.extractor_kind != spec.extractor_kind or tuple(expect.widths) != tuple(spec.widths):
            raise ValueError(
                f"checkpoint extractor {spec.extractor_kind}{spec.widths} does not match "
                f"{expect.extractor_kind}{expect.widths} (feature channels differ)"
            )
    model = Recognizer(spec)
    state = {}
    for group in payload["params"].values():
        state.update(group)
    for name, shape in payload["shapes"].items():
        if list(state[name].shape) != list(shape):
            raise ValueError(f"{path}: parameter {name} has shape {list(state[name].shape)}, header says {shape}")
    model.load_state_dict(state)
    return model, payload
