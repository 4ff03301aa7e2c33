"""CIFAR binary ingestion, subsetting and a synthetic stand-in dataset.

Binary record layout (one record per image, no header):

* cifar10:  1 label byte + 3072 pixel bytes            (3073 bytes)
* cifar100: 1 coarse byte + 1 fine byte + 3072 pixels   (3074 bytes)

Pixels are 1024 red, 1024 green, 1024 blue bytes, each channel row-major
32x32, which is already NCHW order for a single image.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataFormatError

PIXELS = 3 * 32 * 32
VARIANTS = {
    # label bytes before pixels, index of the label used, number of classes per label byte
    "cifar10": {"label_bytes": 1, "label_col": 0, "limits": (10,)},
    "cifar100": {"label_bytes": 2, "label_col": 1, "limits": (20, 100)},
}
SPLIT_FILES = {
    "cifar10": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (["train.bin"], ["test.bin"]),
}
SEARCH_SUBDIRS = {"cifar10": ("", "cifar-10-batches-bin"), "cifar100": ("", "cifar-100-binary")}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str
    class_map: dict = field(default_factory=dict)  # original label -> dense label

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise ConfigError(f"dataset {self.name!r} is empty")
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ConfigError(f"dataset {self.name!r}: images {self.images.shape} vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"dataset {self.name!r}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def record_size(variant: str) -> int:
    return _variant(variant)["label_bytes"] + PIXELS


def _variant(variant: str) -> dict:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown CIFAR variant {variant!r}; expected cifar10 or cifar100") from None


def parse_cifar_records(data: bytes, variant: str, name: Optional[str] = None) -> Dataset:
    """Decode a CIFAR binary file into a dataset with pixels scaled to [0, 1]."""
    spec = _variant(variant)
    rec = spec["label_bytes"] + PIXELS
    buf = np.frombuffer(memoryview(data), dtype=np.uint8)
    if buf.size == 0:
        raise DataFormatError(f"{variant}: zero records")
    if buf.size % rec:
        whole = buf.size // rec
        raise DataFormatError(
            f"{variant}: truncated record {whole} ({buf.size - whole * rec} of {rec} bytes)", offset=whole * rec
        )
    records = buf.reshape(-1, rec)
    for col, limit in enumerate(spec["limits"]):
        bad = np.nonzero(records[:, col] >= limit)[0]
        if bad.size:
            i = int(bad[0])
            raise DataFormatError(
                f"{variant}: label {int(records[i, col])} in record {i} is not below {limit}", offset=i * rec + col
            )
    labels = records[:, spec["label_col"]].astype(np.int64)
    images = records[:, spec["label_bytes"] :].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    num_classes = spec["limits"][spec["label_col"]]
    return Dataset(images, labels, num_classes, name or variant)


def encode_cifar_records(
    pixels: np.ndarray, labels: Sequence[int], variant: str, coarse_labels: Optional[Sequence[int]] = None
) -> bytes:
    """Inverse of :func:`parse_cifar_records` for uint8 pixels of shape (N, 3, 32, 32).

    Float pixels in [0, 1] are accepted and rounded back to bytes.
    """
    spec = _variant(variant)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = len(pixels)
    if pixels.shape != (n, 3, 32, 32):
        raise ConfigError(f"expected pixels of shape (N, 3, 32, 32), got {pixels.shape}")
    out = np.empty((n, spec["label_bytes"] + PIXELS), dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if spec["label_bytes"] == 2:
        coarse = np.zeros(n, dtype=np.uint8) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
        out[:, 0] = coarse
        out[:, 1] = labels
    else:
        out[:, 0] = labels
    out[:, spec["label_bytes"] :] = pixels.reshape(n, PIXELS)
    return out.tobytes()


def _find_file(data_dir: Path, variant: str, filename: str) -> Path:
    for sub in SEARCH_SUBDIRS[variant]:
        path = data_dir / sub / filename
        if path.is_file():
            return path
    raise ConfigError(f"{variant}: {filename} not found under {data_dir}")


def read_split(data_dir: Union[str, Path], variant: str, split: str) -> Dataset:
    """Parse the raw [0, 1]-scaled train or test split from ``data_dir``."""
    _variant(variant)
    train_files, test_files = SPLIT_FILES[variant]
    files = train_files if split == "train" else test_files
    parts = [parse_cifar_records(_find_file(Path(data_dir), variant, f).read_bytes(), variant) for f in files]
    images = np.concatenate([p.images for p in parts]) if len(parts) > 1 else parts[0].images
    labels = np.concatenate([p.labels for p in parts]) if len(parts) > 1 else parts[0].labels
    return Dataset(images, labels, parts[0].num_classes, f"{variant}-{split}")


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Per-channel zero mean / unit variance using statistics of ``train`` only."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
    std = train.images.std(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
    std[std == 0] = 1.0
    out = []
    for ds in (train,) + others:
        images = ((ds.images - mean) / std).astype(np.float32)
        out.append(replace(ds, images=images))
    return tuple(out)


def load_cifar(data_dir: Union[str, Path], variant: str = "cifar100") -> tuple[Dataset, Dataset]:
    train = read_split(data_dir, variant, "train")
    test = read_split(data_dir, variant, "test")
    return standardize(train, test)


def subset(dataset: Dataset, classes: Sequence[int], per_class: Optional[int], seed: int) -> Dataset:
    """Sample ``per_class`` examples of each listed class without replacement.

    Labels are renumbered densely in the order ``classes`` is given; the
    chosen examples keep their original relative order. ``per_class=None``
    keeps every example of the listed classes.
    """
    classes = [int(c) for c in classes]
    if not classes or len(set(classes)) != len(classes):
        raise ConfigError(f"classes must be a non-empty list without repeats, got {classes}")
    if per_class is not None and per_class < 1:
        raise ConfigError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in classes:
        idx = np.nonzero(dataset.labels == c)[0]
        if per_class is None:
            if idx.size == 0:
                raise ConfigError(f"{dataset.name}: class {c} has no samples")
            chosen.append(idx)
            continue
        if idx.size < per_class:
            raise ConfigError(f"{dataset.name}: class {c} has {idx.size} samples, {per_class} requested")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    order = np.sort(np.concatenate(chosen))
    remap = np.full(max(dataset.num_classes, max(classes) + 1), -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    class_map = {c: i for i, c in enumerate(classes)}
    tag = ",".join(map(str, classes))
    name = f"{dataset.name}[classes={tag};per_class={per_class if per_class is not None else 'all'};seed={seed}]"
    return Dataset(dataset.images[order], remap[dataset.labels[order]], len(classes), name, class_map)


def class_templates(num_classes: int, image_hw: int, channels: int = 3) -> np.ndarray:
    """One smooth, clearly distinct pattern per class, values in [0.15, 0.85].

    Class ``c`` is a plane wave whose orientation and frequency depend on
    ``c`` plus a per-channel intensity offset, so nearest-template
    classification separates the classes with a wide margin.
    """
    yy, xx = np.meshgrid(np.arange(image_hw), np.arange(image_hw), indexing="ij")
    out = np.empty((num_classes, channels, image_hw, image_hw))
    for c in range(num_classes):
        angle = np.pi * c / num_classes
        freq = 1.0 + (c % 4)
        phase = 2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) / image_hw
        for ch in range(channels):
            offset = 0.15 * np.cos(2 * np.pi * (c + ch) / max(num_classes, 3))
            out[c, ch] = 0.5 + offset + 0.2 * np.cos(phase + ch * np.pi / 3)
    return out


def synth_dataset(
    n_per_class: int, num_classes: int = 2, image_hw: int = 32, seed: int = 0, noise: float = 0.1
) -> Dataset:
    """Template plus Gaussian noise, clipped to [0, 1]; examples grouped by class."""
    if num_classes < 2:
        raise ConfigError("synthetic dataset needs at least two classes")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, image_hw)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels),) + templates.shape[1:])
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes, f"synthetic-{num_classes}x{n_per_class}-s{seed}")


def nearest_template_accuracy(dataset: Dataset) -> float:
    """Accuracy of assigning each image to the closest class template (L2)."""
    templates = class_templates(dataset.num_classes, dataset.images.shape[-1]).astype(np.float32)
    flat = dataset.images.reshape(len(dataset), -1)
    t = templates.reshape(dataset.num_classes, -1)
    d = (flat**2).sum(1)[:, None] - 2 * flat @ t.T + (t**2).sum(1)[None, :]
    return float((d.argmin(axis=1) == dataset.labels).mean())
