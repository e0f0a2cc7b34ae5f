"""Datasets and augmentation.

Images are float32 arrays of shape (N, C, H, W) with values in [0, 1];
normalization happens per batch in the trainer.
"""
import os
import struct
from dataclasses import dataclass, field

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

CACHE_MAGIC = b"BNSD1"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    class_count: int = 0

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if not self.class_count:
            self.class_count = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and self.labels.max() >= self.class_count:
            raise ValueError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.class_count)


# --------------------------------------------------------------------------
# synthetic textures
# --------------------------------------------------------------------------

def synth_dataset(classes, per_class, size, rng, noise=0.25, split="train"):
    """Oriented sinusoidal gratings, one orientation band per class.

    Bands tile [0, pi/2] and every image is mirrored (theta -> pi - theta)
    with probability 1/2, so a class is closed under horizontal flips and the
    flip augmentation never changes the label. Each image also draws a random
    phase, spatial frequency, colour tint and orientation jitter, then gets
    additive gaussian noise; values are clipped to [0, 1], stored as float32.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    c, h, w = size
    if h < 8 or w < 8:
        raise ValueError(f"synthetic images must be at least 8x8, got {h}x{w}")
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    images = np.empty((n, c, h, w), dtype=np.float32)
    band = (np.pi / 2) / (classes - 1)
    for i, label in enumerate(labels):
        theta = label * band + rng.uniform(-0.25, 0.25) * band
        if rng.random() < 0.5:
            theta = np.pi - theta
        freq = rng.uniform(1.2, 2.2)
        phase = rng.uniform(0, 2 * np.pi)
        tint = rng.uniform(0.3, 1.0, size=c)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = 0.5 + 0.35 * tint[:, None, None] * wave[None]
        img += rng.normal(0.0, noise, size=(c, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order].astype(np.int64), split, classes)


def split_validation(ds, fraction, rng):
    """Seeded disjoint train/validation split."""
    n = len(ds)
    n_val = int(round(n * fraction))
    order = rng.permutation(n)
    return ds.subset(np.sort(order[n_val:]), "train"), ds.subset(np.sort(order[:n_val]), "val")


def write_cache(ds, path):
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<4i", n, c, h, w))
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.images.astype("<f4").tobytes())


def read_cache(path, split="train", class_count=0):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a BNSD1 dataset cache")
    n, c, h, w = struct.unpack_from("<4i", blob, 5)
    offset = 5 + 16
    expected = offset + 4 * n + 4 * n * c * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, "<i4", n, offset).astype(np.int64)
    images = np.frombuffer(blob, "<f4", n * c * h * w, offset + 4 * n).reshape(n, c, h, w)
    return Dataset(images.astype(np.float32), labels, split, class_count)


# --------------------------------------------------------------------------
# CIFAR-10 binary batches
# --------------------------------------------------------------------------

def read_cifar_batch(path, records=None):
    """Parse a CIFAR-10 binary file: per record one label byte then 3072
    pixel bytes (R, G, B planes, row-major)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    if records is not None and raw.size != records * CIFAR_RECORD:
        raise ValueError(f"{path}: expected {records} records, found {raw.size // CIFAR_RECORD}")
    raw = raw.reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory):
    """Returns (train, test) datasets from the standard binary batches."""
    parts = [read_cifar_batch(os.path.join(directory, f), CIFAR_PER_FILE) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]),
                    np.concatenate([p[1] for p in parts]), "train", 10)
    test_images, test_labels = read_cifar_batch(os.path.join(directory, CIFAR_TEST_FILE), CIFAR_PER_FILE)
    return train, Dataset(test_images, test_labels, "test", 10)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    random_crop_pad: int = 0
    horizontal_flip: bool = False
    cutout_size: int = 0
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)


def hflip(img):
    return img[..., ::-1]


def cutout(img, size, cy, cx):
    """Zero a size x size square centred at (cy, cx), clipped at the borders."""
    out = img.copy()
    h, w = img.shape[-2:]
    y0, y1 = max(cy - size // 2, 0), min(cy - size // 2 + size, h)
    x0, x1 = max(cx - size // 2, 0), min(cx - size // 2 + size, w)
    out[..., y0:y1, x0:x1] = 0.0
    return out


def augment(batch, cfg, rng):
    """Pad-and-crop, horizontal flip, then cutout, independently per image."""
    n, c, h, w = batch.shape
    if cfg.cutout_size > min(h, w):
        raise ValueError(f"cutout size {cfg.cutout_size} exceeds image side {min(h, w)}")
    out = np.empty_like(batch)
    pad = cfg.random_crop_pad
    for i in range(n):
        img = batch[i]
        if pad:
            padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
            padded[:, pad:pad + h, pad:pad + w] = img
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            img = padded[:, dy:dy + h, dx:dx + w]
        if cfg.horizontal_flip and rng.random() < 0.5:
            img = hflip(img)
        if cfg.cutout_size:
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            img = cutout(img, cfg.cutout_size, cy, cx)
        out[i] = img
    return out


def channel_stats(ds):
    return ds.images.mean(axis=(0, 2, 3)).tolist(), ds.images.std(axis=(0, 2, 3)).tolist()


def normalize(batch, cfg):
    if not cfg.mean:
        return batch
    mean = np.asarray(cfg.mean)[None, :, None, None]
    std = np.asarray(cfg.std)[None, :, None, None]
    return (batch - mean) / std


def denormalize(batch, cfg):
    if not cfg.mean:
        return batch
    mean = np.asarray(cfg.mean)[None, :, None, None]
    std = np.asarray(cfg.std)[None, :, None, None]
    return batch * std + mean


# --------------------------------------------------------------------------
# generator self-test
# --------------------------------------------------------------------------

def reference_net_accuracy(train, val, rng, epochs=15, width=16, lr=0.05, batch_size=32):
    """Validation accuracy of a fixed 2-layer CNN (3x3 conv, ReLU, 3x3 conv,
    ReLU, global pool, linear) trained with momentum SGD; no augmentation
    beyond per-channel normalization."""
    from . import autograd as ag
    from .ops import sgd_step

    cfg = AugmentationConfig(*([0, False, 0] + list(channel_stats(train))))
    c = train.images.shape[1]
    k = train.class_count

    def he(*shape):
        fan_in = int(np.prod(shape[1:]))
        return ag.Parameter(rng.normal(0, np.sqrt(2.0 / fan_in), size=shape))

    w1, w2 = he(width, c, 3, 3), he(width, width, 3, 3)
    fc = ag.Parameter(rng.normal(0, np.sqrt(1.0 / width), size=(k, width)))
    fb = ag.Parameter(np.zeros(k))
    params = [w1, w2, fc, fb]

    def forward(x):
        h = ag.relu(ag.conv2d(ag.Tensor(x), w1))
        h = ag.relu(ag.conv2d(h, w2))
        return ag.linear(ag.global_avg_pool(h), fc, fb)

    for _ in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = ag.cross_entropy(forward(normalize(train.images[idx], cfg)), train.labels[idx])
            loss.backward()
            sgd_step(params, lr, 0.9, 0.0)
    pred = forward(normalize(val.images, cfg)).data.argmax(axis=1)
    return float((pred == val.labels).mean())
