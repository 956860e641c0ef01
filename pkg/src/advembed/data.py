"""Datasets and image I/O.

All loaders return float32 images shaped ``(H, W, C)`` with pixels in
``[0, 1]``. Pixels travel as 8 bits; :func:`to_uint8` is the single
quantization rule shared by PNG I/O and the embedding pipeline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CIFAR_RECORD = 1 + 32 * 32 * 3
PNG_SUFFIXES = (".png",)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (n, H, W, C) float32
    labels: np.ndarray  # (n,) int64
    num_classes: int
    id: str

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        images, labels = self.images[indices], self.labels[indices]
        return LabeledDataset(images, labels, self.num_classes, dataset_digest(images, labels))


def dataset_digest(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(images.shape).encode())
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def _make(images, labels, num_classes) -> LabeledDataset:
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return LabeledDataset(images, labels, int(num_classes), dataset_digest(images, labels))


def to_uint8(img) -> np.ndarray:
    """Round half up to the nearest of 256 levels: floor(x * 255 + 0.5)."""
    x = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


# --------------------------------------------------------------------------
# CIFAR-10 binary version

def load_cifar10_binary(path) -> LabeledDataset:
    """Parse one or more CIFAR-10 binary batch files (3073-byte records)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    if not paths:
        raise DatasetError("no CIFAR-10 files given")
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"label {labels.max()} > 9 in CIFAR-10 data")
    # each record stores the R plane, then G, then B, each row-major 32x32
    planes = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return _make(from_uint8(planes), labels, 10)


# --------------------------------------------------------------------------
# PNG

def save_png(img, path) -> None:
    """Write an 8-bit PNG (RGB for 3 channels, grayscale for 1), no alpha."""
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ValueError(f"cannot write {arr.shape[2]}-channel image as PNG")
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


def load_png(path, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "1")):
            arr = np.asarray(im.convert("L"))[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def list_pngs(path) -> list[Path]:
    root = Path(path)
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in PNG_SUFFIXES and p.is_file())


def load_png_dir(path) -> LabeledDataset:
    """Directory with one subdirectory of PNGs per class (sorted names -> labels 0..N-1)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for f in list_pngs(d):
            try:
                images.append(load_png(f))
            except OSError as exc:
                raise DatasetError(f"cannot read {f}: {exc}") from exc
            labels.append(label)
    if not images:
        raise DatasetError(f"{root} contains no class subdirectories with PNGs")
    if len({im.shape for im in images}) != 1:
        raise DatasetError(f"{root}: images have mixed dimensions")
    return _make(np.stack(images), labels, len(class_dirs))


def load_image_pool(path) -> np.ndarray:
    """Every PNG under ``path`` (recursively, sorted) stacked into one array."""
    files = list_pngs(path)
    if not files:
        raise DatasetError(f"no PNG images under {path}")
    images = [load_png(f) for f in files]
    if len({im.shape for im in images}) != 1:
        raise DatasetError(f"{path}: images have mixed dimensions")
    return np.stack(images)


# --------------------------------------------------------------------------
# synthetic data

def _gratings(rng, h, w, c, count, amplitude, cycles=(1.0, 4.0)):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, c))
    for _ in range(count):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(*cycles) * 2 * np.pi / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        tint = rng.uniform(0.3, 1.0, size=c)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        out += amplitude * wave[:, :, None] * tint
    return out


def _smooth_noise(rng, shape, sigma, smoothness):
    """Zero-mean noise of standard deviation ``sigma``, blurred over ``smoothness`` pixels."""
    z = rng.standard_normal(shape)
    if smoothness > 0:
        z = gaussian_filter(z, (smoothness, smoothness, 0), mode="wrap")
        z /= z.std()
    return sigma * z


def synth_dataset(num_classes: int, per_class: int, dims: Sequence[int] = (32, 32, 3),
                  seed: int = 0, noise: float = 0.1, noise_smoothness: float = 3.0,
                  background_contrast: float = 0.2, class_contrast: float = 0.02,
                  class_cycles: tuple[float, float] = (3.0, 8.0),
                  sample_seed: int | None = None, quantize: bool = True) -> LabeledDataset:
    """Procedural classes: shared scene + faint per-class gratings + noise.

    Every image is ``scene + pattern[label] + noise``, clamped to [0, 1] and
    (by default) stored at 8 bits like any real image.

    * ``scene`` is a seeded mix of three broad oriented sinusoidal gratings
      (0.5 to 2.5 cycles per image) shared by all classes.
    * ``pattern[label]`` adds two finer gratings of amplitude
      ``class_contrast``, orthogonalized across classes (same norm). The
      class signal is deliberately faint next to the scene and the noise.
    * the per-sample noise has standard deviation ``noise`` and is spatially
      correlated over ``noise_smoothness`` pixels (0 gives white noise), which
      keeps neighbouring pixels similar, as in photographs.

    ``seed`` fixes the scene and class patterns; ``sample_seed`` (defaults to
    ``seed``) fixes the noise draws, so fresh images from the same classes
    come from a different ``sample_seed``.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    h, w, c = (int(d) for d in dims)
    if num_classes > h * w * c:
        raise ValueError("more classes than pixel values")
    rng = np.random.default_rng(seed)
    scene = 0.5 + _gratings(rng, h, w, c, 3, background_contrast, (0.5, 2.5))
    marks = np.stack([_gratings(rng, h, w, c, 2, class_contrast, class_cycles)
                      for _ in range(num_classes)]).reshape(num_classes, -1)
    # random gratings can come out near-opposite, which would make that pair of
    # classes impossible to rank together; orthogonal marks keep all pairs alike
    q, _ = np.linalg.qr(marks.T)
    marks = q.T * np.linalg.norm(marks, axis=1, keepdims=True)
    patterns = scene + marks.reshape(num_classes, h, w, c)
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.empty((len(labels), h, w, c), dtype=np.float64)
    for i, label in enumerate(labels):
        images[i] = patterns[label] + _smooth_noise(rng, (h, w, c), noise, noise_smoothness)
    images = np.clip(images, 0.0, 1.0)
    if quantize:
        images = from_uint8(to_uint8(images))
    return _make(images, labels, num_classes)


def split_dataset(dataset: LabeledDataset, first: int, seed: int = 0):
    """Shuffle with ``seed`` and cut into (first ``first`` items, the rest)."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(order[:first])), dataset.subset(np.sort(order[first:]))


def iter_batches(items: np.ndarray, size: int) -> Iterable[np.ndarray]:
    for i in range(0, len(items), size):
        yield items[i:i + size]
