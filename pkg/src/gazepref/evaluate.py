"""Accuracy, confusion matrices and person-disjoint cross-validation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Union

import numpy as np

from .cnn import NetworkSpec, NetworkState, TrainConfig, predict_batch, train
from .dataset import FoldPlan, LabeledImages, kfold_split

Predictor = Union[NetworkState, Callable[[np.ndarray], np.ndarray]]


def normalize_confusion(counts) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a count matrix.

    Returns (normalized, zero_rows); rows without samples stay zero and are
    flagged in the boolean ``zero_rows`` vector.
    """
    c = np.asarray(counts, dtype=np.float64)
    sums = c.sum(axis=1)
    zero = sums == 0
    out = np.zeros_like(c)
    out[~zero] = c[~zero] / sums[~zero, None]
    return out, zero


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with true classes on rows and predictions on columns."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion counts must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_pairs(cls, true, pred, k: int) -> ConfusionMatrix:
        t, p = np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)
        if t.shape != p.shape:
            raise ValueError("true and predicted labels differ in length")
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("accuracy of an empty confusion matrix")
        return int(np.trace(self.counts)) / self.total

    @property
    def normalized(self) -> np.ndarray:
        return normalize_confusion(self.counts)[0]

    @property
    def zero_rows(self) -> list[int]:
        return np.flatnonzero(normalize_confusion(self.counts)[1]).tolist()

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(),
                "normalized": [[round(v, 6) for v in row] for row in self.normalized.tolist()],
                "zero_rows": self.zero_rows}


def _classes_of(predictor: Predictor, images: np.ndarray) -> np.ndarray:
    if isinstance(predictor, NetworkState):
        return predict_batch(predictor, images)[0]
    return np.asarray(predictor(images), dtype=np.int64)


def evaluate(predictor: Predictor, data: LabeledImages,
             classes: int | None = None) -> tuple[float, ConfusionMatrix]:
    """Accuracy (fraction) and confusion matrix of ``predictor`` on ``data``.

    ``predictor`` is a network state or any callable mapping a uint8 image
    stack to class indices.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty manifest")
    if classes is None:
        classes = predictor.spec.classes if isinstance(predictor, NetworkState) else 3
    labels = data.labels
    if labels.max() >= classes:
        raise ValueError(f"manifest has label {labels.max()} but the predictor has "
                         f"{classes} classes")
    pred = _classes_of(predictor, data.images)
    if pred.shape != labels.shape or pred.min() < 0 or pred.max() >= classes:
        raise ValueError("predictor returned out-of-range classes")
    cm = ConfusionMatrix.from_pairs(labels, pred, classes)
    return cm.accuracy, cm


@dataclass
class FoldResult:
    fold: int
    accuracy: float  # percent, 2 decimals
    train_size: int
    test_size: int
    confusion: ConfusionMatrix
    seconds: float = 0.0


@dataclass
class CrossValReport:
    folds: list[FoldResult]
    seed: int
    class_mode: int
    config: TrainConfig | None = None
    persons: dict[str, int] = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return sum(self.accuracies) / len(self.folds)

    @property
    def fold_sizes(self) -> list[int]:
        return [f.test_size for f in self.folds]

    @property
    def confusion(self) -> ConfusionMatrix:
        total = self.folds[0].confusion
        for f in self.folds[1:]:
            total = total + f.confusion
        return total

    def to_dict(self) -> dict:
        return {"class_mode": self.class_mode,
                "seed": self.seed,
                "fold_accuracy": self.accuracies,
                "mean_accuracy": round(self.mean, 2),
                "fold_sizes": self.fold_sizes,
                "folds": [{"fold": f.fold, "accuracy": f.accuracy, "train_size": f.train_size,
                           "test_size": f.test_size, "confusion": f.confusion.to_dict()}
                          for f in self.folds],
                "confusion": self.confusion.to_dict(),
                "config": asdict(self.config) if self.config else None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _annotate(e: Exception, fold: int) -> Exception:
    try:
        new = type(e)(f"fold {fold}: {e}")
    except Exception:
        return e
    new.fold = fold
    return new


def _run_fold(spec: NetworkSpec, data: LabeledImages, plan: FoldPlan, fold: int,
              config: TrainConfig, class_mode: int) -> FoldResult:
    tr_idx, te_idx = plan.fold_indices(data.persons, fold)
    tr, te = data.select(tr_idx), data.select(te_idx)
    if class_mode == 2:
        tr, te = tr.filter_classes({0, 1}), te.filter_classes({0, 1})
        assert not (tr.labels == 2).any() and not (te.labels == 2).any()
    if len(te) == 0:
        raise ValueError("empty test fold")
    state, report = train(spec, tr, None, config)
    acc, cm = evaluate(state, te, class_mode)
    return FoldResult(fold, round(100.0 * acc, 2), len(tr), len(te), cm, report.seconds)


def run_kfold(spec: NetworkSpec, data: LabeledImages, k: int = 5,
              config: TrainConfig = TrainConfig(), class_mode: int = 3,
              plan: FoldPlan | None = None, lanes: int = 1, log=None) -> CrossValReport:
    """Person-disjoint k-fold cross-validation.

    The split uses ``config.seed``; each fold trains a fresh network with the
    same config.  In 2-class mode class 2 is dropped from both sides.
    """
    if class_mode not in (2, 3):
        raise ValueError("class_mode must be 2 or 3")
    if spec.classes != class_mode:
        raise ValueError(f"network has {spec.classes} outputs but class_mode is {class_mode}")
    if plan is None:
        plan = kfold_split(data.manifest, k, config.seed)
    elif plan.k != k:
        raise ValueError(f"fold plan has {plan.k} folds, expected {k}")

    def one(fold: int) -> FoldResult:
        try:
            res = _run_fold(spec, data, plan, fold, config, class_mode)
        except Exception as e:
            new = _annotate(e, fold)
            if new is e:
                raise
            raise new from e
        if log:
            log({"fold": fold, "accuracy": res.accuracy, "test_size": res.test_size})
        return res

    if lanes > 1:
        with ThreadPoolExecutor(lanes) as pool:
            folds = list(pool.map(one, range(k)))
    else:
        folds = [one(i) for i in range(k)]
    return CrossValReport(folds, config.seed, class_mode, config, dict(plan.assignment))
