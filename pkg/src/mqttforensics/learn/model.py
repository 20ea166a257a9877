"""Training entry point, the TrainedModel bundle and its file format.

Model file layout (little-endian)::

    b"MHNT" | u16 format version | u32 body length | body

where the body is UTF-8 JSON holding the model kind, class names, scaler
and estimator state.  Floats are written in shortest round-trip form, so a
loaded model reproduces the saved model's scores bit for bit.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ForensicsError
from ..flows import FEATURE_SCHEMA_VERSION
from .boosting import GradientBoostingClassifier
from .dataset import Dataset, DatasetError, Mode
from .linear import GaussianNB, LinearSVC
from .neural import MLPClassifier
from .preprocessing import FeatureScaler
from .tree import DecisionTreeClassifier, RandomForestClassifier

MAGIC = b"MHNT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")


class ModelKind(str, enum.Enum):
    DT = "dt"
    RF = "rf"
    SVM = "svm"
    NB = "nb"
    MLP = "mlp"
    GBT = "gbt"


ESTIMATORS = {
    ModelKind.DT: DecisionTreeClassifier,
    ModelKind.RF: RandomForestClassifier,
    ModelKind.SVM: LinearSVC,
    ModelKind.NB: GaussianNB,
    ModelKind.MLP: MLPClassifier,
    ModelKind.GBT: GradientBoostingClassifier,
}


class ModelError(ForensicsError):
    pass


class ModelFormatError(ModelError):
    pass


class CorruptModelError(ModelError):
    pass


class UnsupportedVersionError(ModelError):
    pass


class FeatureMismatchError(ModelError, ValueError):
    pass


def make_estimator(kind, seed: int = 0, **hyper):
    kind = ModelKind(kind)
    cls = ESTIMATORS[kind]
    if "random_state" in cls().get_params():
        hyper.setdefault("random_state", seed)
    return cls(**hyper)


@dataclass
class TrainedModel:
    kind: ModelKind
    scaler: FeatureScaler
    estimator: object
    class_names: tuple[str, ...]
    mode: Mode
    train_seed: int
    hyper: dict = field(default_factory=dict)
    feature_schema: int = FEATURE_SCHEMA_VERSION

    @property
    def final_loss(self) -> float | None:
        return getattr(self.estimator, "final_loss_", None)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Class ids and per-class scores (one column per class name)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.scaler.n_features_in_:
            raise FeatureMismatchError(
                f"model expects {self.scaler.n_features_in_} features, got shape {X.shape}")
        proba = self.estimator.predict_proba(self.scaler.transform(X))
        scores = np.zeros((len(X), len(self.class_names)))
        scores[:, self.estimator.classes_.astype(np.int64)] = proba
        return np.argmax(scores, axis=1), scores


def train(kind, d: Dataset, hyper: dict | None = None, seed: int = 0) -> TrainedModel:
    """Fit the standardizer and a ``kind`` classifier on ``d``."""
    try:
        kind = ModelKind(kind)
    except ValueError:
        raise ModelError(f"unknown model kind {kind!r}") from None
    hyper = dict(hyper or {})
    counts = np.bincount(d.y, minlength=len(d.class_names))
    present = counts[counts > 0]
    if len(present) < 2 or present.min() < 2:
        raise DatasetError("training needs at least two classes with two samples each")
    scaler = FeatureScaler().fit(d.X)
    estimator = make_estimator(kind, seed, **hyper)
    estimator.fit(scaler.transform(d.X), d.y)
    return TrainedModel(kind, scaler, estimator, tuple(d.class_names), d.mode, seed, hyper)


def predict(m: TrainedModel, X) -> tuple[np.ndarray, np.ndarray]:
    return m.predict(X)


def model_to_bytes(m: TrainedModel) -> bytes:
    body = {
        "kind": m.kind.value,
        "class_names": list(m.class_names),
        "mode": m.mode.value,
        "train_seed": m.train_seed,
        "hyper": m.hyper,
        "feature_schema": m.feature_schema,
        "params": m.estimator.get_params(),
        "scaler": m.scaler._to_state(),
        "state": m.estimator._to_state(),
    }
    raw = json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(raw)) + raw


def model_from_bytes(data: bytes) -> TrainedModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if len(data) < _HEADER.size:
        raise CorruptModelError("model header truncated")
    _, version, length = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"model format version {version} is not supported "
                                      f"(expected {FORMAT_VERSION})")
    raw = data[_HEADER.size:]
    if len(raw) != length:
        raise CorruptModelError(f"model body has {len(raw)} bytes, header says {length}")
    try:
        body = json.loads(raw)
        kind = ModelKind(body["kind"])
        estimator = ESTIMATORS[kind](**body["params"])._from_state(body["state"])
        scaler = FeatureScaler()._from_state(body["scaler"])
        return TrainedModel(kind, scaler, estimator, tuple(body["class_names"]),
                            Mode(body["mode"]), body["train_seed"], body["hyper"],
                            body["feature_schema"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModelError(f"model body unreadable: {exc}") from None


def save_model(m: TrainedModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path: str | Path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
