"""Datasets: directory ingestion, stratified splitting, batching, synthetic data."""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, DataError, IoError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Same order as the four-class chest X-ray corpus directory names.
SYNTHETIC_CLASSES = ("COVID", "Lung Opacity", "Normal", "Viral Pneumonia")


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_names: list
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= len(self.class_names):
            raise DataError("label index exceeds the number of classes")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], list(self.class_names), self.source)

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Four synthetic 'radiograph' classes separated by where the bright
    structure sits and how it is textured:

    * COVID: 3-6 small bright blobs in the lower half.
    * Lung Opacity: one large diffuse bright region in the upper half.
    * Normal: dark background only.
    * Viral Pneumonia: horizontal stripe texture over the whole image.

    The intensity bands are chosen so the four quadrant means already separate
    the classes: Normal is dark everywhere, Lung Opacity is bright on top,
    COVID is bright below, and the stripes lift every quadrant well above the
    opacity's lower half.  The classes are invariant to horizontal flips, so
    two-view training with flips cannot erase the class signal.
    """

    n_per_class: int = 500
    image_size: int = 64
    noise: float = 0.05
    background: tuple = (0.15, 0.25)
    blob_intensity: tuple = (0.55, 0.8)
    blob_count: tuple = (3, 6)
    blob_radius: tuple = (0.06, 0.11)
    opacity_intensity: tuple = (0.4, 0.6)
    opacity_radius: tuple = (0.25, 0.35)
    stripe_intensity: tuple = (0.6, 0.8)
    stripe_period: tuple = (3.0, 6.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ContractError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.image_size < 8:
            raise ContractError(f"image_size must be >= 8, got {self.image_size}")
        if self.noise < 0:
            raise ContractError("noise must be nonnegative")


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def _to_gray(img):
    # PIL's "L" conversion uses 0.299 R + 0.587 G + 0.114 B.
    if img.mode in ("I;16", "I", "F"):
        arr = np.asarray(img, dtype=np.float64)
        return arr / (65535.0 if img.mode == "I;16" else max(arr.max(), 1.0))
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_directory(root, resize_to=None):
    """Read ``root/<class>/<image>`` files; class index = sorted name rank.

    ``resize_to`` of None or 0 keeps the size of the first decoded image and
    resizes any other size to it.
    """
    if not os.path.isdir(root):
        raise IoError(f"dataset root {root!r} does not exist")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if len(classes) < 2:
        raise DataError(f"{root!r} needs at least 2 class subdirectories, found {len(classes)}")
    images, labels = [], []
    for label, name in enumerate(classes):
        folder = os.path.join(root, name)
        files = sorted(f for f in os.listdir(folder) if f.lower().endswith(IMAGE_SUFFIXES))
        if not files:
            raise DataError(f"class {name!r} has no image files")
        for fname in files:
            path = os.path.join(folder, fname)
            try:
                with Image.open(path) as img:
                    img.load()
                    if not resize_to:
                        resize_to = img.size[0] if img.size[0] == img.size[1] else min(img.size)
                    if img.size != (resize_to, resize_to):
                        img = img.convert("L").resize((resize_to, resize_to), Image.BILINEAR)
                    images.append(_to_gray(img))
            except (OSError, ValueError) as exc:
                raise DataError(f"cannot decode image {path!r}: {exc}") from exc
            labels.append(label)
    return Dataset(np.stack(images), labels, classes, source=os.path.abspath(root))


def split(ds, spec):
    """Per-class shuffle, first ``round(fraction * n)`` of each class to train."""
    rng = np.random.default_rng(spec.seed)
    counts = ds.class_counts()
    train_idx, test_idx = [], []
    if spec.stratified:
        groups = [np.flatnonzero(ds.labels == c) for c in range(len(ds.class_names))]
    else:
        groups = [np.arange(len(ds))]
    for c, members in enumerate(groups):
        if spec.stratified and counts[c] < 2:
            raise DataError(f"class {ds.class_names[c]!r} has {counts[c]} samples; need at least 2 to split")
        members = members[rng.permutation(len(members))]
        k = _round_half_up(spec.train_fraction * len(members))
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def stratified_fraction(ds, fraction, seed):
    """Keep ``round(fraction * n)`` samples of every class."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"label fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    rng = np.random.default_rng(seed)
    keep = []
    for c, name in enumerate(ds.class_names):
        members = np.flatnonzero(ds.labels == c)
        k = _round_half_up(fraction * len(members))
        if k == 0:
            raise DataError(f"label fraction {fraction} leaves class {name!r} empty")
        keep.append(members[rng.permutation(len(members))[:k]])
    return ds.subset(np.sort(np.concatenate(keep)))


def batches(ds, batch_size, seed, epoch, pretraining=True):
    """Index batches for one epoch; the short tail is dropped when pretraining."""
    if pretraining and batch_size < 2:
        raise ContractError("pretraining batches need at least 2 samples")
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    out = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if pretraining and len(chunk) < batch_size:
            break
        out.append(chunk)
    return out


def _blob(yy, xx, cy, cx, r):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))


def _synth_image(cls, spec, rng):
    s = spec.image_size
    yy, xx = np.meshgrid((np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij")
    img = np.full((s, s), rng.uniform(*spec.background))
    if cls == 0:
        for _ in range(int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))):
            cy, cx = rng.uniform(0.6, 0.9), rng.uniform(0.1, 0.9)
            img += rng.uniform(*spec.blob_intensity) * _blob(yy, xx, cy, cx, rng.uniform(*spec.blob_radius))
    elif cls == 1:
        cy, cx = rng.uniform(0.2, 0.35), rng.uniform(0.35, 0.65)
        r = rng.uniform(*spec.opacity_radius)
        img += rng.uniform(*spec.opacity_intensity) * _blob(yy, xx, cy, cx, r)
    elif cls == 3:
        period = rng.uniform(*spec.stripe_period) / s
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(*spec.stripe_intensity)
        img += amp * (0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase))
    img += spec.noise * rng.standard_normal((s, s))
    return np.clip(img, 0.0, 1.0)


def synthesize(spec):
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for cls in range(len(SYNTHETIC_CLASSES)):
        for _ in range(spec.n_per_class):
            images.append(_synth_image(cls, spec, rng))
            labels.append(cls)
    return Dataset(np.stack(images), labels, list(SYNTHETIC_CLASSES), source=f"synthetic(seed={spec.seed})")


def write_directory(ds, root):
    """Write ``root/<class>/<index>.png`` as 8-bit grayscale PNGs."""
    os.makedirs(root, exist_ok=True)
    for c, name in enumerate(ds.class_names):
        os.makedirs(os.path.join(root, name), exist_ok=True)
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(os.path.join(root, ds.class_names[label], f"{i:05d}.png"))
