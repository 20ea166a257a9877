from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_X_y

from ..errors import ForensicsError
from ..flows import AttackClass, FlowRecord, feature_matrix

BINARY_CLASSES = ("BENIGN", "MALICIOUS")
MULTICLASS_CLASSES = tuple(c.name for c in AttackClass)


class Mode(str, enum.Enum):
    BINARY = "binary"
    MULTICLASS = "multi"


class DatasetError(ForensicsError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_names: tuple[str, ...]
    mode: Mode

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.mode = Mode(self.mode)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise DatasetError("X and y disagree in length")
        if not np.isfinite(self.X).all():
            raise DatasetError("features must be finite")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise DatasetError("label id outside class_names")
        if self.mode == Mode.BINARY and tuple(self.class_names) != BINARY_CLASSES:
            raise DatasetError("binary datasets use classes BENIGN/MALICIOUS")

    def __len__(self):
        return len(self.y)

    def counts(self) -> dict[str, int]:
        ids, n = np.unique(self.y, return_counts=True)
        return {self.class_names[i]: int(c) for i, c in zip(ids, n)}

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.class_names, self.mode)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(",".join(self.class_names).encode())
        return h.hexdigest()

    @classmethod
    def from_flows(cls, flows: Sequence[FlowRecord], mode: Mode | str) -> "Dataset":
        mode = Mode(mode)
        if any(f.label is None for f in flows):
            raise DatasetError("every flow needs a label")
        labels = np.array([int(f.label) for f in flows], dtype=np.int64)
        if mode == Mode.BINARY:
            return cls(feature_matrix(flows), (labels != AttackClass.BENIGN).astype(np.int64),
                       BINARY_CLASSES, mode)
        return cls(feature_matrix(flows), labels, MULTICLASS_CLASSES, mode)


class _RandomSampler(BaseEstimator):
    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit_resample(self, X, y):
        if len(y) == 0:
            raise DatasetError("cannot resample an empty dataset")
        X, y = check_X_y(X, y, dtype=float)
        rng = np.random.default_rng(self.random_state)
        classes, counts = np.unique(y, return_counts=True)
        rows = np.concatenate([self._rows(np.flatnonzero(y == c), counts, rng)
                               for c in classes])
        self.sample_indices_ = rows
        return X[rows], y[rows]


class RandomUnderSampler(_RandomSampler):
    """Draws every class down to the smallest class size, without replacement."""

    def _rows(self, idx, counts, rng):
        return np.sort(rng.choice(idx, size=counts.min(), replace=False))


class RandomOverSampler(_RandomSampler):
    """Tops every class up to the largest class size by duplicating its rows."""

    def _rows(self, idx, counts, rng):
        extra = rng.choice(idx, size=counts.max() - len(idx), replace=True)
        return np.concatenate([idx, extra])


def _resample(sampler, d: Dataset) -> Dataset:
    if len(d) == 0:
        raise DatasetError("cannot resample an empty dataset")
    sampler.fit_resample(d.X, d.y)
    return d.subset(sampler.sample_indices_)


def undersample(d: Dataset, seed: int = 0) -> Dataset:
    return _resample(RandomUnderSampler(seed), d)


def oversample(d: Dataset, seed: int = 0) -> Dataset:
    return _resample(RandomOverSampler(seed), d)
