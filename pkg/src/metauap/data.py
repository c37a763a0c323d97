"""Image sources: IDX and CIFAR-10 binary loaders plus synthetic generators.

All pixels are scaled to [0, 1]; no mean/std standardization, so that
perturbation-size statistics are comparable across sources. The synthetic
source exists so the whole suite runs offline: each class is a fixed stripe
template plus Gaussian pixel noise, which keeps classes linearly separable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels

SYNTH_NOISE_SIGMA = 0.08


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray = field(repr=False)   # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray = field(repr=False)   # (N,) int64
    source_id: str = "unnamed"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("pixels outside [0, 1]")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx],
                             source_id=self.source_id, num_classes=self.num_classes)

    def class_indices(self, c: int) -> np.ndarray:
        return np.nonzero(self.labels == c)[0]


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"file truncated while reading {what}")
    return buf


def load_idx(images_path, labels_path, source_id: str = "idx") -> LabeledImages:
    """Load an IDX image/label file pair (the MNIST container format)."""
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
        raw = _read_exact(f, n * h * w, "image payload")
        if f.read(1):
            raise DataFormatError("trailing bytes after image payload")
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(f, nl, "label payload"), dtype=np.uint8)
    if nl != n:
        raise DataFormatError(f"label count {nl} != image count {n}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / 255.0
    return LabeledImages(images, labels.astype(np.int64), source_id=source_id)


def load_cifar10_bin(paths, source_id: str = "cifar10") -> LabeledImages:
    """Load CIFAR-10 binary batches (3073-byte records, channel-major RGB)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks, axis=0)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(labels.max())
        raise DataFormatError(f"invalid CIFAR-10 label byte {bad}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledImages(images, labels, source_id=source_id, num_classes=10)


SYNTH_AMPLITUDE = 0.15
SYNTH_PHASE_JITTER = np.pi
SYNTH_NOISE_SMOOTHING = 8


def _class_wave(shape, c: int, num_classes: int):
    """Class identity: a stripe frequency/orientation and a base phase."""
    C, H, W = shape
    y = np.arange(H, dtype=np.float32)[None, :, None]
    x = np.arange(W, dtype=np.float32)[None, None, :]
    ch = np.arange(C, dtype=np.float32)[:, None, None]
    freq = 1.0 + (c % 3)
    ang = np.pi * c / max(num_classes, 1)
    wave = 2.0 * np.pi * freq * (np.cos(ang) * y + np.sin(ang) * x) / H
    base = 2.0 * np.pi * c / max(num_classes, 1) + ch * (2.0 * np.pi / 3.0)
    return wave, base


def class_template(shape, c: int, num_classes: int,
                   amplitude: float = SYNTH_AMPLITUDE) -> np.ndarray:
    """The class stripe pattern at its base phase."""
    wave, base = _class_wave(shape, c, num_classes)
    return (0.5 + amplitude * np.sin(wave + base)).astype(np.float32)


def _smooth(noise: np.ndarray, passes: int) -> np.ndarray:
    """Iterated binomial blur over the spatial axes of (N, C, H, W)."""
    for _ in range(passes):
        p = np.pad(noise, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")
        noise = 0.25 * p[:, :, :-2] + 0.5 * p[:, :, 1:-1] + 0.25 * p[:, :, 2:]
        p = np.pad(noise, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="edge")
        noise = 0.25 * p[..., :-2] + 0.5 * p[..., 1:-1] + 0.25 * p[..., 2:]
    return noise


def synth_source(shape, num_classes: int, n_per_class: int, seed: int,
                 noise_sigma: float = SYNTH_NOISE_SIGMA,
                 amplitude: float = SYNTH_AMPLITUDE,
                 phase_jitter: float = SYNTH_PHASE_JITTER,
                 noise_smoothing: int = SYNTH_NOISE_SMOOTHING) -> LabeledImages:
    """Synthetic labeled images: class stripe patterns plus per-image noise.

    Each class is a fixed stripe frequency/orientation; each image draws its
    own phase (style variation, like stroke placement in handwriting) and
    adds spatially smoothed Gaussian pixel noise, clipped to [0, 1]. Phase
    shifts keep every class inside its own two-dimensional sinusoid
    subspace, so the classes stay linearly separable, while perturbations
    fitted to a few images do not transfer to differently-phased ones.
    Deterministic for a given seed; images are ordered class-major.
    """
    if num_classes < 2:
        raise ValueError("synth_source needs at least 2 classes")
    C, H, W = shape
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.empty((num_classes * n_per_class, C, H, W), dtype=np.float32)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        wave, base = _class_wave(shape, c, num_classes)
        phases = rng.uniform(-phase_jitter, phase_jitter, size=(n_per_class, 1, 1, 1))
        block = 0.5 + amplitude * np.sin(wave[None] + base[None] + phases)
        noise = rng.normal(0.0, 1.0, size=(n_per_class, C, H, W))
        if noise_smoothing:
            noise = _smooth(noise, noise_smoothing)
            noise /= noise.std()
        block = np.clip(block + noise_sigma * noise, 0.0, 1.0).astype(np.float32)
        images[c * n_per_class:(c + 1) * n_per_class] = block
        labels[c * n_per_class:(c + 1) * n_per_class] = c
    return LabeledImages(images, labels, source_id=f"synth_{C}x{H}x{W}",
                         num_classes=num_classes)


def linear_probe_accuracy(data: LabeledImages) -> float:
    """Training accuracy of a least-squares one-vs-rest linear classifier.

    Used as an independent separability oracle for synthetic sources.
    """
    n = len(data)
    X = data.images.reshape(n, -1).astype(np.float64)
    X = np.concatenate([X, np.ones((n, 1))], axis=1)
    Y = np.eye(data.num_classes)[data.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = (X @ W).argmax(axis=1)
    return float((pred == data.labels).mean())
