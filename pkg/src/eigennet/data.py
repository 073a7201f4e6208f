"""Dataset ingestion, synthesis, batching and normalization.

Two on-disk formats are supported:

IDX (big endian):
    i32  magic (0x00000803 images, 0x00000801 labels)
    i32  item count, then for images: i32 rows, i32 cols
    u8[] payload

CIFAR-10 binary: concatenated 3073-byte records, 1 label byte followed by
3072 pixel bytes in channel-major 3x32x32 order.

Parsing is bit-exact; ``save_idx``/``save_cifar10_bin`` re-serialize a
parsed dataset back to identical bytes (used by the round-trip tests).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, FormatError, LengthError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073

# community-standard normalization constants keyed by dataset name
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synth": ((0.5,), (0.25,)),
}


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    name: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise FormatError("images must be a uint8 array of shape (N, C, H, W)")
        if len(self.labels) != len(self.images):
            raise LengthError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) == 0:
            raise LengthError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def geometry(self):
        return self.images.shape[1:]

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.name, self.num_classes)


@dataclass
class Batch:
    x: Tensor
    y: np.ndarray


def _read_be32(buf, offset):
    return struct.unpack_from(">i", buf, offset)[0]


def load_idx(images_path, labels_path):
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    count, rows, cols = (_read_be32(raw, 4 * i) for i in (1, 2, 3))
    payload = raw[16:]
    if len(payload) != count * rows * cols:
        raise LengthError(f"image payload holds {len(payload)} bytes, header promises {count * rows * cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"label file magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    count_l = _read_be32(raw, 4)
    payload = raw[8:]
    if len(payload) != count_l:
        raise LengthError(f"label payload holds {len(payload)} bytes, header promises {count_l}")
    if count_l != count:
        raise LengthError(f"{count} images but {count_l} labels")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    return Dataset(images.copy(), labels, "mnist", int(labels.max()) + 1)


def save_idx(dataset, images_path, labels_path):
    n, _, rows, cols = dataset.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(dataset.images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths):
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.empty((0, CIFAR_RECORD), dtype=np.uint8)
    if len(records) == 0:
        raise LengthError("no CIFAR-10 records found")
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(images.copy(), labels, "cifar10", 10)


def save_cifar10_bin(dataset, path):
    n = len(dataset)
    records = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels
    records[:, 1:] = dataset.images.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def synth_blobs(classes, dims, per_class, separation, seed, geometry=None):
    """Gaussian clusters with nearest-center gap separation * sigma, quantized to uint8.

    Deterministic for a fixed seed. ``geometry`` reshapes the feature vector
    into (C, H, W); by default each sample is a 1 x dims x 1 image.
    """
    if separation <= 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    geometry = geometry or (1, dims, 1)
    if int(np.prod(geometry)) != dims:
        raise ConfigError(f"geometry {geometry} does not hold {dims} features")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dims))
    if classes > 1:
        gaps = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
        gap = gaps[~np.eye(classes, dtype=bool)].min()
        centers *= separation / gap  # unit cluster sigma
    samples = centers.repeat(per_class, axis=0) + rng.standard_normal((classes * per_class, dims))
    labels = np.arange(classes).repeat(per_class).astype(np.int64)
    lo, hi = samples.min(), samples.max()
    pixels = np.clip(np.round((samples - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    images = pixels.reshape(classes * per_class, *geometry)
    return Dataset(images, labels, "synth", classes)


def normalization_for(name):
    for key, stats in NORMALIZATION.items():
        if name.startswith(key):
            return stats
    return NORMALIZATION["synth"]


def normalize_images(images, name):
    """uint8 (N, C, H, W) to float64 (v / 255 - mean) / std per channel."""
    mean, std = normalization_for(name)
    c = images.shape[1]
    mean = np.resize(np.asarray(mean), c)[None, :, None, None]
    std = np.resize(np.asarray(std), c)[None, :, None, None]
    return (images.astype(np.float64) / 255.0 - mean) / std


def epoch_permutation(n, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def epoch_batches(dataset, batch_size, seed, epoch, layout):
    """One epoch of normalized batches under a seeded permutation.

    layout 'features' yields x as (width, batch) for dense models,
    'nchw' yields (batch, C, H, W) for convolutional ones. The final short
    batch is emitted.
    """
    n = len(dataset)
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    if layout not in ("features", "nchw"):
        raise ConfigError(f"unknown batch layout {layout!r}")
    order = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = normalize_images(dataset.images[idx], dataset.name)
        if layout == "features":
            x = np.ascontiguousarray(x.reshape(len(idx), -1).T)
        yield Batch(Tensor(x), dataset.labels[idx])
