"""Dataset ingestion: cached CIFAR-10 subsets and an offline synthetic task.

The synthetic task is generated procedurally from a seed, so CI needs no
network: each class is a smooth random template, and samples are jittered,
rescaled and noised copies of it.  Task "a" and task "b" use disjoint
template seeds, giving a disjoint-label transfer task for removal attacks.
"""

from __future__ import annotations

import hashlib
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

DEFAULT_TRAIN_SIZE = 5000
DEFAULT_TEST_SIZE = 1000


@dataclass
class ArrayDataset:
    """In-memory image classification dataset."""

    images: torch.Tensor  # [N, 3, H, W] float32
    labels: torch.Tensor  # [N] int64
    num_classes: int
    name: str

    def __len__(self):
        return self.images.shape[0]

    def batches(self, batch_size, rng=None):
        """Yield (x, y) minibatches; shuffled when an np.random.Generator is given."""
        n = len(self)
        order = np.arange(n) if rng is None else rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size].copy())
            yield self.images[idx], self.labels[idx]

    def subset(self, indices):
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return ArrayDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


@dataclass
class TriggerSet:
    """Images with designated labels for black-box ownership probing."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.images.shape[0]


def _seed_from(*parts):
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _smooth_fields(rng, n, channels, coarse, size):
    """Upsample coarse white noise into smooth random fields [n, channels, size, size]."""
    grid = rng.standard_normal((n, channels, coarse, coarse)).astype(np.float32)
    fields = F.interpolate(
        torch.from_numpy(grid), size=(size, size), mode="bilinear", align_corners=False
    )
    return fields.numpy()


def synthetic_task(split, task="a", n=None, num_classes=10, seed=0, image_size=32,
                   template_noise=0.55, pixel_noise=0.35, max_shift=4):
    """Procedural 10-class dataset; deterministic for a given (task, seed)."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    if n is None:
        n = DEFAULT_TRAIN_SIZE if split == "train" else DEFAULT_TEST_SIZE
    tpl_rng = np.random.default_rng(_seed_from("synthetic-templates", task))
    templates = _smooth_fields(tpl_rng, num_classes, 3, 8, image_size)
    templates -= templates.mean(axis=(1, 2, 3), keepdims=True)
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)

    rng = np.random.default_rng(_seed_from("synthetic-samples", task, split, seed))
    labels = rng.integers(0, num_classes, size=n)
    amp = rng.uniform(0.75, 1.25, size=n).astype(np.float32)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    structured = _smooth_fields(rng, n, 3, 8, image_size) * template_noise
    white = rng.standard_normal((n, 3, image_size, image_size)).astype(np.float32) * pixel_noise

    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i in range(n):
        base = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        images[i] = amp[i] * base + structured[i] + white[i]
    return ArrayDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=num_classes,
        name=f"synthetic-{task}",
    )


def make_trigger_set(n=100, num_classes=10, seed=0, image_size=32):
    """Smooth off-manifold noise images with randomly designated labels."""
    rng = np.random.default_rng(_seed_from("trigger", seed))
    images = _smooth_fields(rng, n, 3, 8, image_size) * 1.2
    labels = rng.integers(0, num_classes, size=n).astype(np.int64)
    return TriggerSet(torch.from_numpy(images), torch.from_numpy(labels))


def _cache_root(root=None):
    if root is not None:
        return Path(root)
    env = os.environ.get("PASSPORTNET_DATA")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "passportnet"


def _fetch_cifar10(root, download):
    root = _cache_root(root)
    archive = root / "cifar-10-python.tar.gz"
    if not archive.exists():
        if not download:
            raise ConfigError(f"CIFAR-10 archive not found at {archive} and download=False")
        root.mkdir(parents=True, exist_ok=True)
        tmp = archive.with_suffix(".part")
        urllib.request.urlretrieve(CIFAR10_URL, tmp)
        tmp.rename(archive)
    digest = hashlib.md5(archive.read_bytes()).hexdigest()
    if digest != CIFAR10_MD5:
        raise ConfigError(
            f"{archive}: checksum mismatch ({digest}); delete the file and re-download"
        )
    return archive


def load_cifar10(split, n=None, seed=0, root=None, download=True):
    """Deterministic CIFAR-10 subset: seeded permutation, first `n` examples."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    archive = _fetch_cifar10(root, download)
    members = (
        [f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)]
        if split == "train"
        else ["cifar-10-batches-py/test_batch"]
    )
    data, labels = [], []
    with tarfile.open(archive, "r:gz") as tar:
        for member in members:
            batch = pickle.load(tar.extractfile(member), encoding="bytes")
            data.append(batch[b"data"])
            labels.extend(batch[b"labels"])
    images = np.concatenate(data).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    mean = np.asarray(CIFAR10_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, dtype=np.float32).reshape(1, 3, 1, 1)
    images = (images - mean) / std
    labels = np.asarray(labels, dtype=np.int64)
    if n is None:
        n = DEFAULT_TRAIN_SIZE if split == "train" else DEFAULT_TEST_SIZE
    order = np.random.default_rng(_seed_from("cifar10-subset", split, seed)).permutation(
        len(labels)
    )[:n]
    return ArrayDataset(
        images=torch.from_numpy(images[order]),
        labels=torch.from_numpy(labels[order]),
        num_classes=10,
        name="cifar10",
    )


def load_dataset(name, split, n=None, seed=0, root=None):
    """Dataset registry used by the CLI: synthetic | synthetic-b | cifar10."""
    if name == "synthetic":
        return synthetic_task(split, task="a", n=n, seed=seed)
    if name == "synthetic-b":
        return synthetic_task(split, task="b", n=n, seed=seed)
    if name == "cifar10":
        return load_cifar10(split, n=n, seed=seed, root=root)
    raise ConfigError(f"unknown dataset {name!r}")
