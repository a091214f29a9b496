"""CSV ingestion, train/test splitting and feature preprocessing."""
from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass, replace

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    header: bool = False
    num_targets: int = 1
    task: str = "regression"


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray  # (N, P) floats for regression, (N,) ints for classification
    name: str = ""
    task: str = "regression"

    @property
    def num_classes(self):
        return int(self.y.max()) + 1 if self.task == "classification" else 0

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        return replace(self, X=self.X[idx], y=self.y[idx])


def _open(path):
    return gzip.open(path, "rt", newline="") if str(path).endswith(".gz") else open(path, newline="")


def load_csv(path, schema=CsvSchema()):
    """Read a rectangular numeric CSV whose last ``num_targets`` columns are targets."""
    with _open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if schema.header and rows:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    if width <= schema.num_targets:
        raise DataError(f"{path}: {width} columns but {schema.num_targets} target columns")
    data = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} columns, expected {width}")
        try:
            data[i] = [float(c) for c in r]
        except ValueError:
            raise DataError(f"{path}: non-numeric cell in row {i}") from None
    if not np.isfinite(data).all():
        bad = int(np.where(~np.isfinite(data).all(axis=1))[0][0])
        raise DataError(f"{path}: non-finite value in row {bad}")
    X, y = data[:, :-schema.num_targets], data[:, -schema.num_targets:]
    if schema.task == "classification":
        if schema.num_targets != 1 or np.any(y != np.round(y)) or np.any(y < 0):
            raise DataError(f"{path}: classification targets must be one column of labels 0..C-1")
        y = y[:, 0].astype(int)
    return Dataset(X, y, name=str(path), task=schema.task)


def write_csv(path, X, y, header=None):
    cols = np.column_stack([X, np.asarray(y).reshape(len(X), -1)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows([[f"{v:.17g}" for v in row] for row in cols])


def split(dataset, ratio=0.9, seed=0):
    """Random permutation split; the first ceil(ratio * N) rows are training rows."""
    N = len(dataset)
    if N < 2:
        raise DataError("need at least two rows to split")
    perm = np.random.default_rng(seed).permutation(N)
    n_train = min(math.ceil(ratio * N), N - 1)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


@dataclass
class Preprocessor:
    """Optional PCA projection followed by per-feature scaling to [-1, 1].

    Regression targets are standardized.  All statistics come from the
    training rows; test rows are transformed with them and are not clipped.
    """

    x_min: np.ndarray = None
    x_max: np.ndarray = None
    y_mean: np.ndarray = None
    y_std: np.ndarray = None
    pca_mean: np.ndarray = None
    pca_components: np.ndarray = None  # (D_raw, k)
    task: str = "regression"

    @classmethod
    def fit(cls, train, pca=0):
        p = cls(task=train.task)
        X = train.X
        if pca:
            p.pca_mean = X.mean(axis=0)
            _, _, Vt = np.linalg.svd(X - p.pca_mean, full_matrices=False)
            p.pca_components = Vt[:pca].T
            X = (X - p.pca_mean) @ p.pca_components
        p.x_min, p.x_max = X.min(axis=0), X.max(axis=0)
        if train.task == "regression":
            p.y_mean = train.y.mean(axis=0)
            std = train.y.std(axis=0)
            p.y_std = np.where(std > 0, std, 1.0)
        return p

    def transform_X(self, X):
        X = np.asarray(X, float)
        if self.pca_components is not None:
            X = (X - self.pca_mean) @ self.pca_components
        span = self.x_max - self.x_min
        safe = np.where(span > 0, span, 1.0)
        # constant features map to the midpoint 0
        return np.where(span > 0, 2.0 * (X - self.x_min) / safe - 1.0, 0.0)

    def transform_y(self, y):
        if self.task != "regression":
            return y
        return (np.asarray(y, float).reshape(len(y), -1) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def transform(self, dataset):
        return replace(dataset, X=self.transform_X(dataset.X), y=self.transform_y(dataset.y))

    def arrays(self):
        out = {"data/x_min": self.x_min, "data/x_max": self.x_max}
        if self.y_mean is not None:
            out["data/y_mean"] = np.asarray(self.y_mean, float)
            out["data/y_std"] = np.asarray(self.y_std, float)
        if self.pca_components is not None:
            out["data/pca_mean"] = self.pca_mean
            out["data/pca_components"] = self.pca_components
        return out

    @classmethod
    def from_arrays(cls, arrays, task):
        get = lambda k: arrays.get(f"data/{k}")
        return cls(get("x_min"), get("x_max"), get("y_mean"), get("y_std"),
                   get("pca_mean"), get("pca_components"), task)
