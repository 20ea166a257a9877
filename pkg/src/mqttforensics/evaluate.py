"""Stratified splitting, weighted metrics, timed benchmarks and report rendering."""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ForensicsError
from .learn import Dataset, ModelKind, oversample, train, undersample


class EvalError(ForensicsError):
    pass


class StratificationError(EvalError):
    pass


class Sampling(str, enum.Enum):
    UNDER = "under"
    OVER = "over"
    NONE = "none"


def split_indices(y, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of a stratified holdout split, each sorted ascending.

    The test size is ``round(n * test_fraction)`` overall, shared out across
    classes by largest remainder; every class keeps at least one row on
    each side.
    """
    if not 0 < test_fraction < 1:
        raise EvalError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) and counts.min() < 2:
        bad = classes[counts < 2].tolist()
        raise StratificationError(f"classes {bad} have fewer than 2 samples")
    ideal = counts * test_fraction
    n_test = np.floor(ideal).astype(np.int64)
    short = int(round(len(y) * test_fraction)) - n_test.sum()
    order = np.lexsort((np.arange(len(classes)), -(ideal - n_test)))
    n_test[order[:max(short, 0)]] += 1
    n_test = np.clip(n_test, 1, counts - 1)

    rng = np.random.default_rng(seed)
    test = []
    for c, k in zip(classes, n_test):
        test.append(rng.permutation(np.flatnonzero(y == c))[:k])
    test = np.sort(np.concatenate(test)) if test else np.empty(0, dtype=np.int64)
    mask = np.ones(len(y), dtype=bool)
    mask[test] = False
    return np.flatnonzero(mask), test


def split(d: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, te = split_indices(d.y, test_fraction, seed)
    return d.subset(tr), d.subset(te)


def resample(d: Dataset, sampling: Sampling | str, seed: int = 0) -> Dataset:
    sampling = Sampling(sampling)
    if sampling == Sampling.UNDER:
        return undersample(d, seed)
    if sampling == Sampling.OVER:
        return oversample(d, seed)
    return d


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list[dict]
    confusion: np.ndarray


def _label_ids(labels, class_names):
    index = {name: i for i, name in enumerate(class_names)}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        if isinstance(lab, str):
            if lab not in index:
                raise EvalError(f"label {lab!r} is not one of {list(class_names)}")
            out[i] = index[lab]
        else:
            if not 0 <= int(lab) < len(class_names):
                raise EvalError(f"label id {lab} out of range")
            out[i] = int(lab)
    return out


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics(y_true, y_pred, class_names: Sequence[str]) -> Metrics:
    """Accuracy plus support-weighted precision, recall and F1.

    Labels may be class names or integer ids.  A class that is never
    predicted has precision 0; per-class F1 with ``p + r == 0`` is 0.
    """
    if len(y_true) != len(y_pred):
        raise EvalError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) == 0:
        raise EvalError("no labels to score")
    K = len(class_names)
    t = _label_ids(y_true, class_names)
    p = _label_ids(y_pred, class_names)
    cm = confusion_matrix(t, p, K)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    w = support / support.sum()
    per_class = [
        {"class": name, "precision": float(prec[k]), "recall": float(rec[k]),
         "f1": float(f1[k]), "support": int(support[k])}
        for k, name in enumerate(class_names)
    ]
    return Metrics(
        accuracy=float(np.trace(cm) / cm.sum()),
        precision=float(w @ prec),
        recall=float(w @ rec),
        f1=float(w @ f1),
        per_class=per_class,
        confusion=cm,
    )


@dataclass
class ModelResult:
    kind: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    train_s: float
    mean_infer_us_per_flow: float


@dataclass
class EvalReport:
    mode: str
    sampling: str
    seed: int
    fingerprint: str
    n_train: int = 0
    n_test: int = 0
    results: list[ModelResult] = field(default_factory=list)

    def result(self, kind) -> ModelResult:
        kind = ModelKind(kind).value
        for r in self.results:
            if r.kind == kind:
                return r
        raise KeyError(kind)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["results"] = [ModelResult(**r) for r in data.get("results", [])]
        return cls(**data)


def save_report(r: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _model_spec(spec):
    if isinstance(spec, (tuple, list)):
        kind, hyper = spec
        return ModelKind(kind), dict(hyper or {})
    return ModelKind(spec), {}


def benchmark(models, train_set: Dataset, test_set: Dataset, repeats: int = 3,
              sampling: Sampling | str = Sampling.NONE, seed: int = 0) -> EvalReport:
    """Train each model once on ``train_set`` and time ``repeats`` test passes.

    ``models`` holds kinds or ``(kind, hyper)`` pairs.  Resampling, if any,
    is applied here to the training partition only; the test partition is
    scored as given.
    """
    if repeats < 3:
        raise EvalError("repeats must be at least 3")
    if len(test_set) == 0:
        raise EvalError("empty test set")
    sampling = Sampling(sampling)
    fitted = resample(train_set, sampling, seed)
    report = EvalReport(train_set.mode.value, sampling.value, seed, train_set.fingerprint(),
                        len(fitted), len(test_set))
    for spec in models:
        kind, hyper = _model_spec(spec)
        t0 = time.perf_counter()
        model = train(kind, fitted, hyper, seed)
        train_s = time.perf_counter() - t0
        passes = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            labels, _scores = model.predict(test_set.X)
            passes.append(time.perf_counter() - t0)
        m = metrics(test_set.y, labels, test_set.class_names)
        report.results.append(ModelResult(
            kind.value, m.accuracy, m.precision, m.recall, m.f1, train_s,
            float(np.mean(passes)) / len(test_set) * 1e6))
    return report


def run_benchmark(d: Dataset, models, sampling: Sampling | str = Sampling.NONE,
                  test_fraction: float = 0.2, seed: int = 0, repeats: int = 3) -> EvalReport:
    """Split first, then resample the training side only, then benchmark."""
    train_set, test_set = split(d, test_fraction, seed)
    return benchmark(models, train_set, test_set, repeats, sampling, seed)


REPORT_COLUMNS = ("model", "mode", "sampling", "accuracy", "precision", "recall", "f1",
                  "train_s", "infer_us_per_flow")


def _rows(r: EvalReport) -> list[list[str]]:
    return [[m.kind, r.mode, r.sampling]
            + [f"{v:.4f}" for v in (m.accuracy, m.precision, m.recall, m.f1,
                                    m.train_s, m.mean_infer_us_per_flow)]
            for m in r.results]


def render_report(r: EvalReport, format: str = "text") -> str:
    """Render as ``text``, ``csv`` or ``markdown``; numbers carry 4 decimals."""
    rows = _rows(r)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    if format != "text":
        raise EvalError(f"unknown report format {format!r}")
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(REPORT_COLUMNS)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [f"seed={r.seed} train={r.n_train} test={r.n_test} data={r.fingerprint[:16]}",
             fmt.format(*REPORT_COLUMNS)]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines) + "\n"
