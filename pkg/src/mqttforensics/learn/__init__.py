"""Resampling and the six flow classifiers."""

from .boosting import GradientBoostingClassifier
from .dataset import (
    BINARY_CLASSES,
    MULTICLASS_CLASSES,
    Dataset,
    DatasetError,
    Mode,
    RandomOverSampler,
    RandomUnderSampler,
    oversample,
    undersample,
)
from .linear import GaussianNB, LinearSVC
from .model import (
    CorruptModelError,
    FeatureMismatchError,
    ModelError,
    ModelFormatError,
    ModelKind,
    TrainedModel,
    UnsupportedVersionError,
    load_model,
    make_estimator,
    predict,
    save_model,
    train,
)
from .neural import DivergenceError, MLPClassifier
from .preprocessing import FeatureScaler
from .tree import DecisionTreeClassifier, RandomForestClassifier

__all__ = [
    "BINARY_CLASSES", "MULTICLASS_CLASSES", "CorruptModelError", "Dataset", "DatasetError",
    "DecisionTreeClassifier", "DivergenceError", "FeatureMismatchError", "FeatureScaler",
    "GaussianNB", "GradientBoostingClassifier", "LinearSVC", "MLPClassifier", "Mode",
    "ModelError", "ModelFormatError", "ModelKind", "RandomForestClassifier",
    "RandomOverSampler", "RandomUnderSampler", "TrainedModel", "UnsupportedVersionError",
    "load_model", "make_estimator", "oversample", "predict", "save_model", "train",
    "undersample",
]
