"""Datasets: IDX files, CIFAR binaries, normalization, synthetic fallback.

Images are held as float64 ``(N, C, H, W)`` arrays scaled to [0, 1], labels
as int64 class indices. The IDX reader and writer round-trip byte-exactly on
the u8 grid, and the synthetic generator quantizes to that grid so generated
corpora flow through the identical file pipeline as downloaded ones.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataError, TruncatedFileError

__all__ = [
    "Dataset",
    "load_idx",
    "write_idx",
    "load_cifar",
    "normalize",
    "split",
    "take",
    "synth_blobs",
    "mnist_or_surrogate",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


def _open_maybe_gz(path):
    try:
        if path.endswith(".gz"):
            return gzip.open(path, "rb")
        if not os.path.exists(path) and os.path.exists(path + ".gz"):
            return gzip.open(path + ".gz", "rb")
        return open(path, "rb")
    except OSError as exc:
        raise DataError("cannot read %s: %s" % (path, exc)) from exc


def _read_exact(fh, count, path):
    try:
        data = fh.read(count)
    except OSError as exc:
        # gzip reports corrupt streams lazily, on read
        raise DataError("cannot read %s: %s" % (path, exc)) from exc
    if len(data) != count:
        raise TruncatedFileError("%s: expected %d more bytes, found %d"
                                 % (path, count, len(data)))
    return data


def load_idx(images_path, labels_path, n_classes=None):
    """Read an images/labels IDX pair into a dataset.

    Headers are big-endian; a wrong magic, a short file, or differing sample
    counts raise typed errors.
    """
    with _open_maybe_gz(images_path) as fh:
        magic, n, h, w = struct.unpack(">iiii", _read_exact(fh, 16, images_path))
        if magic != IMAGES_MAGIC:
            raise BadMagicError("%s: magic 0x%08x, expected 0x%08x"
                                % (images_path, magic, IMAGES_MAGIC))
        raw = _read_exact(fh, n * h * w, images_path)
        if fh.read(1):
            raise DataError("%s: trailing bytes after %d images" % (images_path, n))
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)

    with _open_maybe_gz(labels_path) as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, labels_path))
        if magic != LABELS_MAGIC:
            raise BadMagicError("%s: magic 0x%08x, expected 0x%08x"
                                % (labels_path, magic, LABELS_MAGIC))
        raw = _read_exact(fh, n_labels, labels_path)
        if fh.read(1):
            raise DataError("%s: trailing bytes after %d labels" % (labels_path, n_labels))
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise CountMismatchError("%d images but %d labels" % (n, n_labels))
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n_labels else 0
    return Dataset(images.astype(np.float64) / 255.0, labels, n_classes)


def write_idx(dataset, images_path, labels_path):
    """Write a dataset as an images/labels IDX pair on the u8 grid."""
    images = dataset.images
    if images.shape[1] != 1:
        raise DataError("IDX images are single-channel, got %d channels"
                        % images.shape[1])
    n, _, h, w = images.shape
    u8 = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGES_MAGIC, n, h, w))
        fh.write(u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar(batch_paths, n_classes=10):
    """Read CIFAR-style binary batches: records of one label byte + 3072 pixels."""
    images, labels = [], []
    record = 1 + 3 * 32 * 32
    for path in batch_paths:
        with _open_maybe_gz(path) as fh:
            try:
                raw = fh.read()
            except OSError as exc:
                raise DataError("cannot read %s: %s" % (path, exc)) from exc
        if len(raw) == 0 or len(raw) % record:
            raise TruncatedFileError("%s: size %d is not a whole number of records"
                                     % (path, len(raw)))
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, 0].astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images).astype(np.float64) / 255.0,
                   np.concatenate(labels), n_classes)


def normalize(train, others=(), mode="per_pixel"):
    """Standardize by training-set statistics; returns datasets plus stats.

    ``per_pixel`` uses one mean/std per pixel position, ``per_channel`` one
    per channel. Positions with (near) zero variance keep unit scale.
    """
    if mode == "none":
        return (train,) + tuple(others), (0.0, 1.0)
    if mode == "per_pixel":
        mean = train.images.mean(axis=0)
        std = train.images.std(axis=0)
    elif mode == "per_channel":
        mean = train.images.mean(axis=(0, 2, 3), keepdims=True)[0]
        std = train.images.std(axis=(0, 2, 3), keepdims=True)[0]
    else:
        raise DataError("unknown normalization %r" % (mode,))
    std = np.where(std < 1e-8, 1.0, std)
    out = []
    for ds in (train,) + tuple(others):
        out.append(Dataset((ds.images - mean) / std, ds.labels, ds.n_classes))
    return tuple(out), (mean, std)


def split(dataset, val_fraction, rng):
    """Shuffled train/validation split."""
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    perm = rng.permutation(n)
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])


def take(dataset, n):
    return dataset.subset(np.arange(min(n, len(dataset))))


def synth_blobs(n, n_classes=10, size=28, seed=0, jitter=2.0, noise=0.08,
                sample_seed=None):
    """Class-conditional bump images quantized to the u8 grid.

    Each class owns a few fixed Gaussian bumps; samples jitter the bump
    centers and add pixel noise, so classes are linearly nontrivial but
    learnable by a small convolutional network. ``seed`` fixes the class
    templates; ``sample_seed`` (defaulting to it) draws the samples, so train
    and test splits share templates by passing different sample seeds.
    """
    rng = np.random.default_rng(seed)
    n_bumps = 3
    centers = rng.uniform(size * 0.2, size * 0.8, size=(n_classes, n_bumps, 2))
    sigmas = rng.uniform(1.6, 3.2, size=(n_classes, n_bumps))
    amps = rng.uniform(0.6, 1.0, size=(n_classes, n_bumps))

    rng = np.random.default_rng(seed if sample_seed is None else sample_seed)
    labels = rng.integers(0, n_classes, size=n)
    offsets = rng.normal(0.0, jitter, size=(n, n_bumps, 2))
    grain = rng.normal(0.0, noise, size=(n, size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((n, 1, size, size))
    for i in range(n):
        c = labels[i]
        img = grain[i].copy()
        for b in range(n_bumps):
            cy, cx = centers[c, b] + offsets[i, b]
            img += amps[c, b] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                       / (2.0 * sigmas[c, b] ** 2))
        images[i, 0] = img
    images = np.clip(images, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0
    return Dataset(images, labels.astype(np.int64), n_classes)


def _find_idx_pair(root, image_names, label_names):
    for img in image_names:
        for lab in label_names:
            pi, pl = os.path.join(root, img), os.path.join(root, lab)
            if (os.path.exists(pi) or os.path.exists(pi + ".gz")) and \
               (os.path.exists(pl) or os.path.exists(pl + ".gz")):
                return pi, pl
    return None


def mnist_or_surrogate(cache_dir="data", seed=0, n_train=None, n_test=None):
    """Digit corpus if one is on disk, else a generated stand-in.

    Looks for the standard IDX quartet under ``$PLNET_MNIST_DIR`` and then
    ``./data/mnist``. When neither exists, a synthetic corpus is generated,
    written as IDX files under ``cache_dir``, and read back through the same
    loader. Returns ``(train, test, source)``.
    """
    roots = []
    env = os.environ.get("PLNET_MNIST_DIR")
    if env:
        roots.append(env)
    roots.append(os.path.join("data", "mnist"))
    train_images = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]
    train_labels = ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]
    test_images = ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]
    test_labels = ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]
    for root in roots:
        tr = _find_idx_pair(root, train_images, train_labels)
        te = _find_idx_pair(root, test_images, test_labels)
        if tr and te:
            train = load_idx(*tr, n_classes=10)
            test = load_idx(*te, n_classes=10)
            if n_train:
                train = take(train, n_train)
            if n_test:
                test = take(test, n_test)
            return train, test, root

    root = os.path.join(cache_dir, "synth-mnist")
    os.makedirs(root, exist_ok=True)
    paths = [os.path.join(root, name) for name in
             ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
    if not all(os.path.exists(p) for p in paths):
        write_idx(synth_blobs(6000, seed=seed), paths[0], paths[1])
        write_idx(synth_blobs(1000, seed=seed, sample_seed=seed + 1),
                  paths[2], paths[3])
    train = load_idx(paths[0], paths[1], n_classes=10)
    test = load_idx(paths[2], paths[3], n_classes=10)
    if n_train:
        train = take(train, n_train)
    if n_test:
        test = take(test, n_test)
    return train, test, root
