"""Synthetic 2-D classification data with a fixed 50/50 train/val split."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .supernet import Batch

KINDS = ("blobs", "moons")
# offset for the held-out test draw; keeps it disjoint from the train/val stream
TEST_SEED_OFFSET = 7919


@dataclass
class Dataset:
    train: Batch
    val: Batch
    num_classes: int
    test: Batch = None
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.train.inputs.shape[1]

    @property
    def test_split(self):
        return self.val if self.test is None else self.test


def _generate(kind, n, noise, seed, num_classes):
    if kind == "blobs":
        x, y = make_blobs(n_samples=n, centers=num_classes, cluster_std=noise, random_state=seed)
    elif kind == "moons":
        x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    return x.astype(np.float64), y.astype(np.int64)


def gen_dataset(kind, n, noise, seed, num_classes=3, path=None) -> Dataset:
    """Generate ``n`` points, split the first half to train and the rest to val.

    A separate held-out test set of ``n // 2`` points is drawn from the same
    generator with a shifted seed. If ``path`` is given the train/val rows are
    written as CSV (``x1,x2,label``) and the test rows go to a sibling
    ``<stem>.test.csv``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    if n < 10:
        raise ValueError("n must be >= 10")
    if kind == "moons":
        num_classes = 2
    x, y = _generate(kind, n, noise, seed, num_classes)
    xt, yt = _generate(kind, max(n // 2, 2), noise, seed + TEST_SEED_OFFSET, num_classes)
    h = n // 2
    ds = Dataset(
        Batch(x[:h], y[:h]),
        Batch(x[h:], y[h:]),
        num_classes,
        test=Batch(xt, yt),
        meta={"kind": kind, "n": n, "noise": noise, "seed": seed, "num_classes": num_classes},
    )
    if path is not None:
        write_csv(path, x, y)
        write_csv(test_path(path), xt, yt)
    return ds


def test_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".test.csv")


def write_csv(path, x, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(x.shape[1])] + ["label"])
        for row, lab in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or len(body) < 2:
        raise ValueError(f"{path}: expected header x1,...,label and at least two rows")
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    return x, y


def load_csv(path, num_classes=None) -> Dataset:
    """Read a dataset CSV and its ``.test.csv`` sibling if present; otherwise val doubles as test."""
    x, y = _read_rows(path)
    h = len(y) // 2
    test = None
    if test_path(path).exists():
        xt, yt = _read_rows(test_path(path))
        test = Batch(xt, yt)
        y_all = np.concatenate([y, yt])
    else:
        y_all = y
    k = int(y_all.max()) + 1 if num_classes is None else num_classes
    return Dataset(Batch(x[:h], y[:h]), Batch(x[h:], y[h:]), k, test=test, meta={"path": str(Path(path))})


def minibatches(batch: Batch, batch_size, rng):
    """Shuffle and cut into ``len // batch_size`` full batches (at least one)."""
    n = len(batch)
    perm = rng.permutation(n)
    steps = max(1, n // batch_size)
    bs = min(batch_size, n)
    return [Batch(batch.inputs[perm[i * bs:(i + 1) * bs]], batch.labels[perm[i * bs:(i + 1) * bs]]) for i in range(steps)]
