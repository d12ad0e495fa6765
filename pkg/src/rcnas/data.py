"""Dataset registry: CIFAR binary ingestion and synthetic Gaussian image datasets,
split into train / eval / test."""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

DEFAULT_EVAL_SIZE = 256
DATA_DIR_ENV = "RCNAS_DATA_DIR"

# (directory, train files, test files, record bytes, label bytes, label offset, classes)
_CIFAR = {
    "cifar10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)],
                ["test_batch.bin"], 3073, 1, 0, 10),
    "cifar100": ("cifar-100-binary", ["train.bin"], ["test.bin"], 3074, 2, 1, 100),
}


@dataclass
class LabeledImages:
    x: torch.Tensor  # float32, (n, 3, R, R), values in [0, 1]
    y: torch.Tensor  # int64, (n,)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "LabeledImages":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledImages(self.x[idx], self.y[idx])


@dataclass
class DatasetSplits:
    train: LabeledImages
    eval: LabeledImages
    test: LabeledImages
    num_classes: int
    resolution: int
    identifier: str


def data_root(data_dir: str | os.PathLike | None = None) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(data_dir) if data_dir is not None else Path("data")


def _read_cifar_records(path: Path, record: int, label_bytes: int, label_offset: int):
    if not path.is_file():
        raise FileNotFoundError(
            f"missing CIFAR file {path}: expected the binary version "
            f"({record}-byte records: {label_bytes} label byte(s) + 3072 pixel bytes)"
        )
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        raise ValueError(f"{path} is not a whole number of {record}-byte records")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_offset].astype(np.int64)
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def _load_cifar(name: str, root: Path):
    folder, train_files, test_files, record, lb, lo, classes = _CIFAR[name]
    parts = [_read_cifar_records(root / folder / f, record, lb, lo) for f in train_files]
    tr_x = np.concatenate([p[0] for p in parts])
    tr_y = np.concatenate([p[1] for p in parts])
    te_x, te_y = _read_cifar_records(root / folder / test_files[0], record, lb, lo)

    def to_images(px, lab):
        return LabeledImages(torch.from_numpy(px).float().div_(255.0), torch.from_numpy(lab))

    return to_images(tr_x, tr_y), to_images(te_x, te_y), classes


def synthetic_gauss(num_classes: int, n: int, resolution: int = 32, seed: int = 0,
                    prototype_scale: float = 0.06, noise: float = 0.12) -> LabeledImages:
    """Class-balanced Gaussian clusters around random image prototypes, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    shape = (3, resolution, resolution)
    protos = 0.5 + prototype_scale * rng.standard_normal((num_classes, *shape))
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = protos[y] + noise * rng.standard_normal((n, *shape))
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return LabeledImages(torch.from_numpy(x), torch.from_numpy(y.astype(np.int64)))


def _split_train_eval(pool: LabeledImages, eval_size: int, seed: int):
    if eval_size >= len(pool):
        raise ValueError(f"eval_size {eval_size} leaves no training data (pool of {len(pool)})")
    perm = torch.randperm(len(pool), generator=torch.Generator().manual_seed(seed))
    return pool.subset(perm[eval_size:]), pool.subset(perm[:eval_size])


def load_dataset(identifier: str, eval_size: int = DEFAULT_EVAL_SIZE, seed: int = 0,
                 data_dir: str | os.PathLike | None = None) -> DatasetSplits:
    """Resolve a dataset id into disjoint train / eval / test splits.

    Recognised ids: ``cifar10``, ``cifar100``, ``cifar10-subset:<n>`` and
    ``synthetic-gauss:<classes>:<n>[:<resolution>]``. The eval split is carved
    out of the training pool; ``n`` counts training items after that cut for
    synthetic data and the size of the sampled pool for CIFAR subsets.
    """
    parts = identifier.split(":")
    head = parts[0]
    if head in ("cifar10", "cifar100") and len(parts) == 1:
        train_pool, test, classes = _load_cifar(head, data_root(data_dir))
        train, ev = _split_train_eval(train_pool, eval_size, seed)
        return DatasetSplits(train, ev, test, classes, 32, identifier)
    if head == "cifar10-subset" and len(parts) == 2:
        n = int(parts[1])
        train_pool, test, classes = _load_cifar("cifar10", data_root(data_dir))
        if n > len(train_pool):
            raise ValueError(f"subset of {n} exceeds the {len(train_pool)} training images")
        g = torch.Generator().manual_seed(seed)
        pool = train_pool.subset(torch.randperm(len(train_pool), generator=g)[:n])
        train, ev = _split_train_eval(pool, eval_size, seed)
        return DatasetSplits(train, ev, test, classes, 32, identifier)
    if head == "synthetic-gauss" and len(parts) in (3, 4):
        classes, n = int(parts[1]), int(parts[2])
        res = int(parts[3]) if len(parts) == 4 else 32
        if classes < 2 or n < 1:
            raise ValueError(f"bad synthetic dataset {identifier!r}")
        n_test = max(eval_size, n // 5)
        data_seed = zlib.crc32(identifier.encode()) + seed
        pool = synthetic_gauss(classes, n + eval_size + n_test, res, data_seed)
        idx = torch.arange(len(pool))
        train = pool.subset(idx[:n])
        ev = pool.subset(idx[n:n + eval_size])
        test = pool.subset(idx[n + eval_size:])
        return DatasetSplits(train, ev, test, classes, res, identifier)
    raise ValueError(
        f"unknown dataset {identifier!r}: expected cifar10, cifar100, cifar10-subset:<n> "
        "or synthetic-gauss:<classes>:<n>[:<resolution>]"
    )
