'''
Dataset readers for the training harness: MNIST IDX files, CIFAR-10 binary
batches and a seeded synthetic Gaussian-prototype set.
'''

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

import config
from errors import ArgumentError, FormatError
from tensor_core import Rng

logger = logging.getLogger(__name__)

DATASET_KINDS = ("mnist-idx", "cifar10-bin", "synthetic-gaussian")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "eval": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_EVAL_FILES = ("test_batch.bin",)


@dataclass
class DatasetSpec:
    """
    Where and what to load.

    For synthetic-gaussian, train_subset / eval_subset are the number of
    samples generated; for files they truncate to the first n examples.
    """

    kind: str = "synthetic-gaussian"
    path: Optional[str] = None
    train_subset: Optional[int] = None
    eval_subset: Optional[int] = None
    num_classes: int = 10
    image_shape: tuple = (3, 8, 8)
    seed: int = 7
    noise: float = 1.0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ArgumentError(f"unknown dataset kind {self.kind!r}; choose from {DATASET_KINDS}")
        self.image_shape = tuple(self.image_shape)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def head(self, n):
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.name)


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise OSError(f"could not read dataset file {path}: {e.strerror or e}") from e


def parse_idx(data, path, expected_magic):
    """
    Decode an IDX file (big-endian header, unsigned bytes).

    Args:
        data: File contents.
        path: Used in error messages.
        expected_magic: 0x00000803 for images, 0x00000801 for labels.

    Returns:
        uint8 ndarray with the shape declared in the header
    """
    if len(data) < 4:
        raise FormatError(path, len(data), "truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(path, 0, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = magic & 0xFF
    header = 4 + 4 * dims
    if len(data) < header:
        raise FormatError(path, len(data), f"truncated IDX header, {dims} dimensions declared")
    shape = struct.unpack(f">{dims}I", data[4:header])
    need = int(np.prod(shape))
    if len(data) - header < need:
        raise FormatError(path, len(data), f"truncated IDX data, expected {need} bytes after the header")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(shape)


def read_idx_pair(images_path, labels_path):
    '''Images as N x 1 x H x W uint8 plus int64 labels.'''
    images = parse_idx(_read_bytes(images_path), images_path, config.IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), labels_path, config.IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(images_path, 0, f"expected 3 IDX dimensions, got {images.ndim}")
    if labels.shape[0] != images.shape[0]:
        raise FormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    return images[:, None, :, :], labels.astype(np.int64)


def parse_cifar_records(data, path):
    """
    Decode CIFAR-10 binary records: one label byte then 3072 CHW pixel bytes.

    Returns:
        (images N x 3 x 32 x 32 uint8, labels int64)
    """
    size = config.CIFAR10_RECORD_BYTES
    if len(data) % size:
        raise FormatError(path, len(data) - len(data) % size, f"truncated record, file size {len(data)}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, size)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(path, int(bad[0]) * size, f"label {labels[bad[0]]} out of range")
    return records[:, 1:].reshape(-1, *config.CIFAR10_IMAGE_SHAPE), labels


def _standardize(images, mean, std):
    x = images.astype(np.float64) / 255.0
    mean = np.asarray(mean).reshape(1, -1, 1, 1)
    std = np.asarray(std).reshape(1, -1, 1, 1)
    return np.ascontiguousarray((x - mean) / std)


def _find(root, name):
    for candidate in (name, name.replace("-idx", ".idx")):
        path = root / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"{root / name} not found")


def _load_mnist(spec):
    root = Path(spec.path)
    out = []
    for split, (img, lbl) in MNIST_FILES.items():
        images, labels = read_idx_pair(_find(root, img), _find(root, lbl))
        out.append(Dataset(_standardize(images, config.MNIST_MEAN, config.MNIST_STD), labels, f"mnist-{split}"))
    return out


def _load_cifar(spec):
    root = Path(spec.path)
    out = []
    for split, files in (("train", CIFAR10_TRAIN_FILES), ("eval", CIFAR10_EVAL_FILES)):
        parts = [parse_cifar_records(_read_bytes(root / name), root / name) for name in files if (root / name).exists()]
        if not parts:
            raise FileNotFoundError(f"no CIFAR-10 {split} batches under {root}")
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        out.append(Dataset(_standardize(images, config.CIFAR10_MEAN, config.CIFAR10_STD), labels, f"cifar10-{split}"))
    return out


def synthetic_gaussian(seed, num_classes, samples, image_shape, noise=1.0, stream=0):
    """
    Gaussian blobs around one random prototype image per class.

    Labels cycle through the classes; `stream` selects an independent draw
    around the same prototypes (0 for train, 1 for eval).
    """
    rng = Rng(seed)
    prototypes = rng.normal((num_classes,) + tuple(image_shape))
    draw = rng.spawn(stream + 1)
    labels = np.arange(samples) % num_classes
    images = prototypes[labels] + noise * draw.normal((samples,) + tuple(image_shape))
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), f"synthetic-{stream}")


def load_dataset(spec):
    """
    Load the train and eval splits described by a DatasetSpec.

    Pixels of file datasets are scaled to [0, 1] and standardized with the
    per-dataset constants in config. Order is the file order; shuffling is
    left to the trainer.

    Returns:
        (train Dataset, eval Dataset)
    """
    if spec.kind == "synthetic-gaussian":
        train = synthetic_gaussian(spec.seed, spec.num_classes, spec.train_subset or 512,
                                   spec.image_shape, spec.noise, stream=0)
        evaluation = synthetic_gaussian(spec.seed, spec.num_classes, spec.eval_subset or 128,
                                        spec.image_shape, spec.noise, stream=1)
    else:
        if not spec.path:
            raise ArgumentError(f"dataset kind {spec.kind} needs a path")
        loader = _load_mnist if spec.kind == "mnist-idx" else _load_cifar
        train, evaluation = loader(spec)
        train, evaluation = train.head(spec.train_subset), evaluation.head(spec.eval_subset)
    logger.info("loaded %s: %d train / %d eval examples of shape %s",
                spec.kind, len(train), len(evaluation), train.image_shape)
    return train, evaluation


def augment_batch(images, rng, flip=False, crop=False, padding=config.CROP_PADDING):
    '''Random horizontal flip and zero-padded random crop, drawn from `rng`.'''
    if not (flip or crop):
        return images
    out = images.copy()
    n, _, h, w = images.shape
    if flip:
        mask = rng.uniform(n) < 0.5
        out[mask] = out[mask][..., ::-1]
    if crop:
        padded = np.pad(out, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        offsets = rng.integers(0, 2 * padding + 1, shape=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out
