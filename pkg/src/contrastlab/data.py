"""Datasets: CIFAR-10 binary records, a synthetic latent-class generator, minibatch sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR_SPLIT_SIZES = {"train": 50000, "test": 10000}
LAYOUT_FILE = "layout.json"


class DatasetIOError(OSError):
    pass


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class UnlabeledImages:
    """Image-only view handed to the training loop."""

    images: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> np.ndarray:
        return self.images[i]


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def unlabeled(self) -> UnlabeledImages:
        return UnlabeledImages(self.images)

    def subset(self, count: int) -> "LabeledDataset":
        return LabeledDataset(self.images[:count], self.labels[:count], self.num_classes, self.split)


# ---------------------------------------------------------------------------
# binary records: 1 label byte, then the R, G and B planes, each row-major


def record_size(image_size: int = 32) -> int:
    return 1 + 3 * image_size * image_size


def encode_record(img: np.ndarray, label: int) -> bytes:
    planar = np.ascontiguousarray(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
    return bytes([int(label)]) + planar.tobytes()


def decode_records(raw: bytes, image_size: int = 32, num_classes: int = 10,
                   source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    rsize = record_size(image_size)
    whole = len(raw) // rsize
    if whole * rsize != len(raw):
        raise DatasetIOError(f"{source}: short record at byte offset {whole * rsize} "
                             f"({len(raw) - whole * rsize} of {rsize} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(whole, rsize)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        k = int(bad[0])
        raise CorruptionError(f"{source}: label {labels[k]} > {num_classes - 1} in record {k} "
                              f"(byte offset {k * rsize})")
    images = arr[:, 1:].reshape(whole, 3, image_size, image_size).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def read_records(path: str | Path, image_size: int = 32, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: missing dataset file") from exc
    return decode_records(raw, image_size, num_classes, source=str(path))


def write_records(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        for img, lab in zip(images, labels):
            fh.write(encode_record(img, lab))


def load_cifar10(directory: str | Path, split: str = "train") -> LabeledDataset:
    """Read the standard CIFAR-10 binary batches (all five train files, or the test file)."""
    if split not in CIFAR_SPLIT_SIZES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(directory)
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [read_records(directory / name) for name in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images, labels, 10, split)


def save_record_dir(directory: str | Path, train: LabeledDataset, test: LabeledDataset) -> None:
    """Write a dataset pair in the CIFAR record layout (one train file, one test file)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_records(directory / "data_batch_1.bin", train.images, train.labels)
    write_records(directory / "test_batch.bin", test.images, test.labels)
    (directory / LAYOUT_FILE).write_text(json.dumps(
        {"image_size": train.image_size, "num_classes": train.num_classes}))


def load_record_dir(directory: str | Path, split: str = "train") -> LabeledDataset:
    """Load whichever ``data_batch_*.bin`` / ``test_batch.bin`` files a directory holds."""
    directory = Path(directory)
    layout_path = directory / LAYOUT_FILE
    layout = json.loads(layout_path.read_text()) if layout_path.exists() else {}
    size, classes = layout.get("image_size", 32), layout.get("num_classes", 10)
    if split == "train":
        files = sorted(directory.glob("data_batch_*.bin"))
    elif split == "test":
        files = [directory / "test_batch.bin"]
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not files:
        raise DatasetIOError(f"{directory}: no data_batch_*.bin files")
    parts = [read_records(f, size, classes) for f in files]
    return LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                          classes, split)


# ---------------------------------------------------------------------------
# synthetic latent-class images

SHAPES = ("disk", "square", "triangle", "ring", "cross", "hbars", "vbars", "diagonal", "checker", "x")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    per_class: int = 50
    image_size: int = 32
    seed: int = 0
    hue_jitter: float = 0.15
    noise: float = 10.0

    def __post_init__(self):
        if self.num_classes < 1 or self.per_class < 1 or self.image_size < 4:
            raise ValueError("num_classes and per_class must be >= 1 and image_size >= 4")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]) * 255.0


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) - cy, np.arange(size) - cx, indexing="ij")
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * xx + sa * yy, -sa * xx + ca * yy
    inside = np.maximum(np.abs(u), np.abs(v)) <= r
    if kind == "disk":
        return u * u + v * v <= r * r
    if kind == "square":
        return inside
    if kind == "triangle":
        return (v <= r * 0.8) & (v >= 2 * np.abs(u) - r)
    if kind == "ring":
        d = np.sqrt(u * u + v * v)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "cross":
        return inside & ((np.abs(u) <= r / 3) | (np.abs(v) <= r / 3))
    if kind == "hbars":
        return inside & (np.floor((v + r) / (r / 2.5)) % 2 == 0)
    if kind == "vbars":
        return inside & (np.floor((u + r) / (r / 2.5)) % 2 == 0)
    if kind == "diagonal":
        return inside & (np.floor((u + v + 2 * r) / (r / 2)) % 2 == 0)
    if kind == "checker":
        return inside & ((np.floor((u + r) / (r / 2)) + np.floor((v + r) / (r / 2))) % 2 == 0)
    # "x": two crossing diagonal bands
    return inside & ((np.abs(u - v) <= r / 3) | (np.abs(u + v) <= r / 3))


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> LabeledDataset:
    """Deterministic labeled images; each class has its own shape and base hue.

    Class prototypes depend only on ``spec.seed``; instances on ``(seed, split)``,
    so train and test splits share classes but not images.
    """
    proto_rng = np.random.default_rng([spec.seed, 0])
    shapes = [SHAPES[c % len(SHAPES)] for c in range(spec.num_classes)]
    base_hue = (np.arange(spec.num_classes) / spec.num_classes + proto_rng.uniform(0, 1)) % 1.0
    split_key = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([spec.seed, split_key])
    size = spec.image_size
    n = spec.num_classes * spec.per_class
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    for k, c in enumerate(labels):
        hue = (base_hue[c] + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
        fg = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))
        bg = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.4), rng.uniform(0.05, 0.45))
        r = size * rng.uniform(0.25, 0.36)
        cy = (size - 1) / 2 + rng.uniform(-0.12, 0.12) * size
        cx = (size - 1) / 2 + rng.uniform(-0.12, 0.12) * size
        angle = rng.uniform(-0.25, 0.25)
        mask = _shape_mask(shapes[c], size, cy, cx, r, angle)
        img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, spec.noise, (size, size, 3))
        images[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledDataset(images, labels, spec.num_classes, split)


# ---------------------------------------------------------------------------
# preprocessing and sampling


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def from_images(cls, images: np.ndarray) -> "ChannelStats":
        f = np.asarray(images, dtype=np.float64) / 255.0
        mean = f.mean(axis=(0, 1, 2))
        std = f.std(axis=(0, 1, 2))
        std = np.where(std > 1e-6, std, 1.0)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.std], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ChannelStats":
        return cls(tuple(float(v) for v in arr[0]), tuple(float(v) for v in arr[1]))


def standardize(images: np.ndarray, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    """uint8 (N, H, W, 3) -> standardized (N, 3, H, W) floats."""
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    f = (np.asarray(images, dtype=np.float32) / 255.0 - mean) / std
    return np.ascontiguousarray(f.transpose(0, 3, 1, 2)).astype(dtype, copy=False)


def batch_sampler(n_items: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Seeded per-epoch permutation cut into full batches; the short tail is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    full = n_items // batch_size
    return [perm[b * batch_size:(b + 1) * batch_size] for b in range(full)]
