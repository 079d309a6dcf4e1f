"""Datasets, augmentation, synthetic glyph domains and paired batch sampling.

Images are float32 arrays in [0, 1] with shape C x H x W. Normalisation to
zero mean / unit variance happens inside the model (see ``Recognizer``).
"""
from __future__ import annotations

import bz2
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .attention import TransformSpec, transform_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


class DatasetError(Exception):
    """A dataset could not be located or decoded."""


@dataclass
class DatasetSplit:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: Optional[np.ndarray]
    domain_tag: str
    class_count: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("need one label per image")

    def __len__(self):
        return len(self.images)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "DatasetSplit":
        """View with labels stripped; the only form of a target split the trainer sees."""
        return DatasetSplit(self.images, None, self.domain_tag, self.class_count, self.name)

    def subset(self, idx) -> "DatasetSplit":
        labels = None if self.labels is None else self.labels[idx]
        return DatasetSplit(self.images[idx], labels, self.domain_tag, self.class_count, self.name)


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    erase_area_min: float = 0.02
    erase_area_max: float = 0.4
    erase_aspect: float = 0.3
    resize_to: Optional[int] = None
    erase_attempts: int = 10

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if not 0.0 <= self.erase_area_min <= self.erase_area_max < 1.0:
            raise ValueError("need 0 <= erase_area_min <= erase_area_max < 1")
        if not 0.0 < self.erase_aspect <= 1.0:
            raise ValueError("erase_aspect must lie in (0, 1]")


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    t = torch.from_numpy(np.ascontiguousarray(images))
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp(0, 1).numpy()


# ---------------------------------------------------------------------------
# loading


def _read_image(path: Path, channels: Optional[int]):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if channels == 1 or (channels is None and im.mode in ("L", "1", "I", "I;16", "F")):
                arr = np.asarray(im.convert("L"), dtype=np.float32)[None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def _stack(arrays, size, path):
    if not arrays:
        raise DatasetError(f"no images found under {path}")
    if size is None:
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise DatasetError(f"images under {path} have different shapes {sorted(shapes)}; set a resize size")
        return np.stack(arrays)
    return np.concatenate([resize_images(a[None], size) for a in arrays])


def _load_folder(root: Path, domain: str, size, channels, class_names):
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        images = _stack([_read_image(p, channels) for p in files], size, root)
        k = len(class_names) if class_names else None
        return DatasetSplit(images, None, domain, k, root.name)
    names = list(class_names) if class_names else [p.name for p in subdirs]
    index = {n: i for i, n in enumerate(names)}
    arrays, labels = [], []
    for d in subdirs:
        if d.name not in index:
            raise DatasetError(f"class directory {d} not in the configured class list")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {d} is empty")
        for f in files:
            arrays.append(_read_image(f, channels))
            labels.append(index[d.name])
    return DatasetSplit(_stack(arrays, size, root), np.array(labels), domain, len(names), root.name)


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: Path) -> np.ndarray:
    """Decode an IDX file (the MNIST binary layout), optionally gzipped."""
    try:
        with _open_maybe_gz(path) as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read IDX file {path}: {exc}") from exc
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DatasetError(f"{path} is not an IDX file")
    dtype_code, ndim = data[2], data[3]
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise DatasetError(f"{path}: unknown IDX dtype 0x{dtype_code:02x}")
    dims = struct.unpack(">" + "I" * ndim, data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=dtypes[dtype_code], offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: truncated IDX payload")
    return arr.reshape(dims)


def _find(root: Path, stems):
    for stem in stems:
        for suffix in ("", ".gz"):
            p = root / f"{stem}{suffix}"
            if p.exists():
                return p
    return None


def _load_idx(root: Path, role: str, domain: str, size):
    prefix = "train" if role == "train" else "t10k"
    img = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lab = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    if img is None or lab is None:
        raise DatasetError(f"IDX image/label files for role {role!r} not found in {root}")
    images = read_idx(img).astype(np.float32)[:, None] / 255.0
    labels = read_idx(lab).astype(np.int64)
    if len(images) != len(labels):
        raise DatasetError(f"{root}: {len(images)} images but {len(labels)} labels")
    if size is not None:
        images = resize_images(images, size)
    return DatasetSplit(images, labels, domain, 10, root.name)


def _load_svhn(root: Path, role: str, domain: str, size, channels):
    from scipy.io import loadmat

    path = root / ("train_32x32.mat" if role == "train" else "test_32x32.mat")
    try:
        mat = loadmat(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read SVHN file {path}: {exc}") from exc
    images = mat["X"].transpose(3, 2, 0, 1).astype(np.float32) / 255.0
    labels = mat["y"].reshape(-1).astype(np.int64) % 10  # digit 0 is stored as 10
    if channels == 1:
        images = images.mean(axis=1, keepdims=True)
    if size is not None:
        images = resize_images(images, size)
    return DatasetSplit(images, labels, domain, 10, root.name)


def _load_usps(root: Path, role: str, domain: str, size):
    # LIBSVM layout: "<label 1..10> idx:value ..." with 256 features in [-1, 1]
    path = _find(root, ["usps" if role == "train" else "usps.t"])
    if path is None:
        bz = root / ("usps.bz2" if role == "train" else "usps.t.bz2")
        path = bz if bz.exists() else None
    if path is None:
        raise DatasetError(f"USPS file for role {role!r} not found in {root}")
    opener = bz2.open if path.suffix == ".bz2" else open
    images, labels = [], []
    try:
        with opener(path, "rt") as fh:
            for line_no, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                vec = np.full(256, -1.0, dtype=np.float32)
                for tok in parts[1:]:
                    i, v = tok.split(":")
                    vec[int(i) - 1] = float(v)
                images.append(vec.reshape(1, 16, 16))
                labels.append(int(float(parts[0])) - 1)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot parse USPS file {path}: {exc}") from exc
    arr = (np.stack(images) + 1.0) / 2.0
    if size is not None:
        arr = resize_images(arr, size)
    return DatasetSplit(arr, np.array(labels), domain, 10, root.name)


def detect_format(root: Path) -> str:
    if root.is_dir():
        names = {p.name for p in root.iterdir()}
        if any("idx3-ubyte" in n for n in names):
            return "idx"
        if "train_32x32.mat" in names or "test_32x32.mat" in names:
            return "svhn"
        if any(n.startswith("usps") for n in names):
            return "usps"
        return "folder"
    raise DatasetError(f"dataset path {root} is not a directory")


def load_split(
    path,
    role: str = "train",
    domain: str = "source",
    size: Optional[int] = None,
    channels: Optional[int] = 1,
    fmt: str = "auto",
    class_names=None,
) -> DatasetSplit:
    """Load a split from a class-per-directory tree or a standard digit-dataset layout.

    ``role`` selects train/test files for the digit formats. Ordering is
    deterministic (sorted paths). A folder without class subdirectories yields
    an unlabeled split.
    """
    root = Path(path)
    if not root.exists():
        raise DatasetError(f"dataset path does not exist: {root}")
    if role not in ("train", "test"):
        raise ValueError(f"role must be 'train' or 'test', got {role!r}")
    fmt = detect_format(root) if fmt == "auto" else fmt
    if fmt == "folder":
        split = _load_folder(root, domain, size, channels, class_names)
    elif fmt == "idx":
        split = _load_idx(root, role, domain, size)
    elif fmt == "svhn":
        split = _load_svhn(root, role, domain, size, channels)
    elif fmt == "usps":
        split = _load_usps(root, role, domain, size)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    split.name = f"{root.name}:{role}"
    return split


# ---------------------------------------------------------------------------
# synthetic glyphs


@dataclass(frozen=True)
class SyntheticSpec:
    """Random stroke glyphs; the shift parameters act on the target domain only."""

    classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    size: int = 28
    strokes: int = 4
    mirror_probability: float = 0.5
    thickness: float = 1.6
    jitter: float = 0.045
    # target shift
    thickness_shift: float = 1.2
    thickness_jitter: float = 0.6
    noise: float = 0.25
    erosion: float = 0.25
    contrast: float = 0.7
    clutter: int = 2

    @property
    def shifted(self) -> bool:
        return any(
            v != 0 for v in (self.thickness_shift, self.thickness_jitter, self.noise, self.erosion, self.clutter)
        ) or self.contrast != 1.0

    def without_shift(self) -> "SyntheticSpec":
        return replace(self, thickness_shift=0.0, thickness_jitter=0.0, noise=0.0, erosion=0.0, contrast=1.0, clutter=0)


def _class_prototypes(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    # K x S x 2 x 2 segment endpoints in unit coordinates, chained into a polyline
    protos = np.empty((spec.classes, spec.strokes, 2, 2))
    for k in range(spec.classes):
        pts = rng.uniform(0.18, 0.82, size=(spec.strokes + 1, 2))
        protos[k, :, 0] = pts[:-1]
        protos[k, :, 1] = pts[1:]
    return protos


def _render(segments: np.ndarray, size: int, thickness: np.ndarray) -> np.ndarray:
    # segments: S x 2 x 2 in pixel coordinates (x, y); thickness: S
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    p = np.stack([xs.ravel(), ys.ravel()], axis=1)  # P x 2
    a = segments[:, 0][:, None, :]
    b = segments[:, 1][:, None, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-9)
    t = np.clip(((p[None] - a) * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = np.sqrt(((p[None] - closest) ** 2).sum(-1))  # S x P
    ink = np.clip(thickness[:, None] / 2.0 + 0.5 - d, 0.0, 1.0).max(axis=0)
    return ink.reshape(size, size)


def _draw_domain(rng, protos, labels, spec: SyntheticSpec, shifted: bool) -> np.ndarray:
    n, size = len(labels), spec.size
    out = np.empty((n, 1, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        seg = protos[k] + rng.normal(0.0, spec.jitter, size=protos[k].shape)
        scale = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-0.06, 0.06, size=2)
        seg = (seg - 0.5) * scale + 0.5 + shift
        if rng.random() < spec.mirror_probability:
            seg[..., 0] = 1.0 - seg[..., 0]
        thick = np.full(len(seg), spec.thickness) + rng.uniform(-0.2, 0.2)
        if shifted:
            thick = thick + spec.thickness_shift + rng.uniform(0.0, spec.thickness_jitter, size=len(seg))
        img = _render(seg * size, size, thick)
        if shifted:
            if spec.clutter:
                # short spurious scratches
                m = rng.integers(0, spec.clutter + 1)
                if m:
                    c = rng.uniform(0.05, 0.95, size=(m, 1, 2))
                    d = rng.normal(0.0, 0.12, size=(m, 1, 2))
                    scratch = np.concatenate([c, c + d], axis=1) * size
                    img = np.maximum(img, 0.8 * _render(scratch, size, np.full(m, 1.0)))
            if spec.erosion > 0:
                coarse = rng.random((size // 4 + 1, size // 4 + 1))
                blotch = np.kron(coarse, np.ones((4, 4)))[:size, :size]
                img = img * (blotch >= spec.erosion)
            img = img * spec.contrast + (1 - spec.contrast) * 0.5 * rng.random()
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, size=img.shape)
        out[i, 0] = np.clip(img, 0.0, 1.0)
    return out


class DomainPair(NamedTuple):
    source: DatasetSplit
    target: DatasetSplit
    source_test: DatasetSplit
    target_test: DatasetSplit


def make_synthetic_pair(seed: int, spec: SyntheticSpec = SyntheticSpec()) -> DomainPair:
    """Generate labelled train/test glyph splits for a source and a target domain.

    Both domains share the per-class stroke prototypes; only the target gets
    the shift. Mirrored glyphs appear in both domains. Fully determined by
    ``seed``.
    """
    root = np.random.SeedSequence(seed)
    proto_ss, src_ss, tgt_ss = root.spawn(3)
    protos = _class_prototypes(np.random.default_rng(proto_ss), spec)
    out = {}
    for domain, ss in (("source", src_ss), ("target", tgt_ss)):
        rng = np.random.default_rng(ss)
        shifted = domain == "target" and spec.shifted
        splits = []
        for part, count in (("train", spec.per_class), ("test", spec.test_per_class)):
            labels = np.repeat(np.arange(spec.classes), count)
            rng.shuffle(labels)
            images = _draw_domain(rng, protos, labels, spec, shifted)
            splits.append(DatasetSplit(images, labels, domain, spec.classes, f"synthetic-{domain}:{part}"))
        out[domain] = splits
    return DomainPair(out["source"][0], out["target"][0], out["source"][1], out["target"][1])


# ---------------------------------------------------------------------------
# augmentation and batches


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip followed by random erasing (C x H x W in, same shape out)."""
    out = np.array(image, dtype=np.float32, copy=True)
    if rng.random() < cfg.flip_probability:
        out = out[..., ::-1].copy()
    if cfg.erase_area_max <= 0:
        return out
    h, w = out.shape[-2:]
    area = h * w
    log_r = (np.log(cfg.erase_aspect), -np.log(cfg.erase_aspect))
    for _ in range(cfg.erase_attempts):
        target = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * area
        aspect = float(np.exp(rng.uniform(*log_r)))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if not (0 < eh <= h and 0 < ew <= w):
            continue
        if not cfg.erase_area_min <= eh * ew / area <= cfg.erase_area_max:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out[..., top : top + eh, left : left + ew] = rng.random((out.shape[0], eh, ew))
        break
    return out


@dataclass
class PairedBatch:
    source_images: torch.Tensor
    source_labels: torch.Tensor
    target_images: torch.Tensor
    target_transformed: torch.Tensor
    transform_specs: list = field(default_factory=list)


def assemble_batch(src_images, src_labels, tgt_images, spec: TransformSpec, rng, aug: Optional[AugmentConfig]):
    if aug is not None:
        src_images = np.stack([augment(im, aug, rng) for im in src_images])
        tgt_images = np.stack([augment(im, aug, rng) for im in tgt_images])
    specs = [spec.draw(rng) for _ in range(len(tgt_images))]
    xt = torch.from_numpy(np.ascontiguousarray(tgt_images, dtype=np.float32))
    return PairedBatch(
        source_images=torch.from_numpy(np.ascontiguousarray(src_images, dtype=np.float32)),
        source_labels=torch.from_numpy(np.asarray(src_labels, dtype=np.int64)),
        target_images=xt,
        target_transformed=transform_image(xt, specs),
        transform_specs=specs,
    )


def sample_batch(
    source: DatasetSplit,
    target: DatasetSplit,
    batch_size: int,
    spec: TransformSpec,
    rng: np.random.Generator,
    aug: Optional[AugmentConfig] = None,
) -> PairedBatch:
    """Draw B source and B target items uniformly (without replacement within a batch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(source) == 0 or len(target) == 0:
        raise ValueError("both splits must be non-empty")
    if not source.has_labels:
        raise ValueError("source split must be labelled")
    si = rng.choice(len(source), size=batch_size, replace=batch_size > len(source))
    ti = rng.choice(len(target), size=batch_size, replace=batch_size > len(target))
    return assemble_batch(source.images[si], source.labels[si], target.images[ti], spec, rng, aug)


class EpochSampler:
    """Index stream that reshuffles every epoch; a pure function of (seed, stream, step)."""

    def __init__(self, n: int, seed: int, stream: int):
        if n < 1:
            raise ValueError("cannot sample from an empty split")
        self.n, self.seed, self.stream = n, seed, stream
        self._cache = {}

    def _perm(self, epoch):
        if epoch not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            rng = np.random.default_rng([self.seed, self.stream, epoch])
            self._cache[epoch] = rng.permutation(self.n)
        return self._cache[epoch]

    def indices(self, step: int, batch_size: int) -> np.ndarray:
        pos = np.arange(step * batch_size, (step + 1) * batch_size)
        epochs, offsets = np.divmod(pos, self.n)
        return np.array([self._perm(int(e))[o] for e, o in zip(epochs, offsets)])


class BatchStream:
    """Deterministic paired batches for the trainer; never touches target labels."""

    def __init__(self, source: DatasetSplit, target: DatasetSplit, batch_size: int, spec: TransformSpec,
                 seed: int, aug: Optional[AugmentConfig] = None):
        if not source.has_labels:
            raise ValueError("source split must be labelled")
        self.source = source
        self.target = target.unlabeled()
        self.batch_size, self.spec, self.seed, self.aug = batch_size, spec, seed, aug
        self._src = EpochSampler(len(source), seed, 0)
        self._tgt = EpochSampler(len(self.target), seed, 1)

    def batch(self, step: int) -> PairedBatch:
        si = self._src.indices(step, self.batch_size)
        ti = self._tgt.indices(step, self.batch_size)
        rng = np.random.default_rng([self.seed, 2, step])
        return assemble_batch(self.source.images[si], self.source.labels[si], self.target.images[ti],
                              self.spec, rng, self.aug)
