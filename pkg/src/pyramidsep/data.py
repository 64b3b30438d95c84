"""CIFAR binary IO, synthetic datasets and the standard CIFAR preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
PAD = 4


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (count, 3, h, w) float32
    labels: np.ndarray  # (count,) int64
    num_classes: int
    split: str = "train"
    coarse_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (count, c, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledImageSet":
        coarse = None if self.coarse_labels is None else self.coarse_labels[index]
        return replace(self, images=self.images[index], labels=self.labels[index], coarse_labels=coarse)


def _record_layout(num_classes: int) -> Tuple[int, int]:
    if num_classes == 10:
        return 1, 1 + PIXELS
    if num_classes == 100:
        return 2, 2 + PIXELS
    raise ValueError(f"CIFAR binaries hold 10 or 100 classes, got {num_classes}")


def parse_cifar_binary(raw: bytes, num_classes: int, split: str = "train") -> LabeledImageSet:
    label_bytes, record = _record_layout(num_classes)
    if len(raw) % record:
        raise ValueError(f"truncated CIFAR file: {len(raw)} bytes is not a multiple of {record}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    coarse = recs[:, 0].astype(np.int64) if label_bytes == 2 else None
    images = recs[:, label_bytes:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return LabeledImageSet(images, labels, num_classes, split, coarse)


def load_cifar_binary(path, num_classes: int, split: str = "train") -> LabeledImageSet:
    """Read a CIFAR-10 (label, pixels) or CIFAR-100 (coarse, fine, pixels) binary file."""
    return parse_cifar_binary(Path(path).read_bytes(), num_classes, split)


def encode_cifar_binary(data: LabeledImageSet) -> bytes:
    """Inverse of :func:`parse_cifar_binary`; pixels are rounded to bytes."""
    label_bytes, record = _record_layout(data.num_classes)
    if data.images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"CIFAR records hold {IMAGE_SHAPE} images, got {data.images.shape[1:]}")
    n = len(data)
    out = np.empty((n, record), dtype=np.uint8)
    if label_bytes == 2:
        out[:, 0] = 0 if data.coarse_labels is None else data.coarse_labels
    out[:, label_bytes - 1] = data.labels
    pixels = np.clip(np.rint(data.images * 255.0), 0, 255).astype(np.uint8)
    out[:, label_bytes:] = pixels.reshape(n, PIXELS)
    return out.tobytes()


def write_cifar_binary(path, data: LabeledImageSet) -> None:
    Path(path).write_bytes(encode_cifar_binary(data))


def load_cifar_dir(data_dir, num_classes: int) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Load the standard binary distribution layout of CIFAR-10 or CIFAR-100."""
    d = Path(data_dir)
    if num_classes == 10:
        train_files = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_files = [d / "test_batch.bin"]
    else:
        train_files, test_files = [d / "train.bin"], [d / "test.bin"]

    def _read(files, split):
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {', '.join(missing)}")
        return parse_cifar_binary(b"".join(f.read_bytes() for f in files), num_classes, split)

    return _read(train_files, "train"), _read(test_files, "test")


@dataclass(frozen=True)
class PreprocessSpec:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    random_crop: bool = True
    horizontal_flip: bool = True

    def __post_init__(self):
        if any(not s > 0 for s in self.std):
            raise ValueError(f"per-channel std must be positive, got {self.std}")

    @classmethod
    def from_training(cls, data: LabeledImageSet, **flags) -> "PreprocessSpec":
        if data.split != "train":
            raise ValueError("preprocessing statistics must come from the training split")
        x = data.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        if np.any(std <= 0):
            raise ValueError("training split has a constant channel (zero std)")
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std), **flags)

    def to_manifest(self) -> str:
        lines = [
            "mean = " + ",".join(repr(m) for m in self.mean),
            "std = " + ",".join(repr(s) for s in self.std),
            f"random_crop = {str(self.random_crop).lower()}",
            f"horizontal_flip = {str(self.horizontal_flip).lower()}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "PreprocessSpec":
        kv = {}
        for line in text.splitlines():
            if line.strip() and not line.lstrip().startswith("#"):
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls(
            tuple(float(v) for v in kv["mean"].split(",")),
            tuple(float(v) for v in kv["std"].split(",")),
            kv.get("random_crop", "true") == "true",
            kv.get("horizontal_flip", "true") == "true",
        )


def normalize_array(images: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(spec.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (images - mean) / std


def denormalize_array(images: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(spec.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return images * std + mean


def normalize(data: LabeledImageSet, spec: PreprocessSpec) -> LabeledImageSet:
    """Per-channel standardization with statistics taken from the training split."""
    return replace(data, images=normalize_array(data.images, spec))


def augment(image: np.ndarray, rng: np.random.Generator, offset: Optional[Tuple[int, int]] = None, flip: Optional[bool] = None) -> np.ndarray:
    """Zero-pad by 4, crop a random window of the original size, maybe flip.

    ``offset`` and ``flip`` pin the random choices (for tests); when left as
    ``None`` they are drawn from ``rng`` in that order.
    """
    c, h, w = image.shape
    if offset is None:
        dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    else:
        dy, dx = offset
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)))
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, crop: bool = True, flip: bool = True) -> np.ndarray:
    n, c, h, w = images.shape
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2)) if crop else np.full((n, 2), PAD)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    padded = np.pad(images, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    out = np.empty_like(images)
    for i, ((dy, dx), f) in enumerate(zip(offsets, flips)):
        win = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = win[:, :, ::-1] if f else win
    return out


def synthesize_dataset(
    num_classes: int,
    count: int,
    image_size: int = 32,
    seed: int = 0,
    noise: float = 0.1,
    split: str = "train",
    prototype_seed: Optional[int] = None,
) -> LabeledImageSet:
    """Class-conditional Gaussian-blob images in [0, 1].

    Classes are balanced: when ``count`` is not a multiple of ``num_classes``
    the first ``count % num_classes`` classes get one extra sample.

    Each class owns a prototype: a smooth Gaussian blob with a class-specific
    centre, width and RGB colour over a grey background.  Samples add i.i.d.
    pixel noise of std ``noise`` and are clipped to [0, 1].  Prototypes depend
    only on ``prototype_seed`` (default: ``seed``) so that train and test sets
    drawn with different seeds share classes.
    """
    if count < 1 or num_classes < 2:
        raise ValueError(f"need count >= 1 and num_classes >= 2, got {count}, {num_classes}")
    proto_rng = np.random.default_rng([seed if prototype_seed is None else prototype_seed, 0x5EED])
    rng = np.random.default_rng([seed, 1])
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    protos = np.empty((num_classes, 3, image_size, image_size))
    for k in range(num_classes):
        cy, cx = proto_rng.uniform(0.25, 0.75, size=2)
        sigma = proto_rng.uniform(0.12, 0.3)
        colour = proto_rng.uniform(-0.45, 0.45, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        protos[k] = 0.5 + colour[:, None, None] * blob[None]
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    images = protos[labels] + noise * rng.standard_normal((count, 3, image_size, image_size))
    return LabeledImageSet(np.clip(images, 0.0, 1.0), labels, num_classes, split)
