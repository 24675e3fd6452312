"""Cross-validation and hold-out protocols, fold construction and metrics."""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .data import EEGDataset, check_compatible, subsample_stratified
from .model import ModelConfig, build_model, predict
from .trainer import TrainPlan, fit, split_validation

log = logging.getLogger(__name__)

REPORT_SCHEMA = "fbcnet-eval-report/1"


class Metrics(NamedTuple):
    accuracy: float
    kappa: float
    confusion: np.ndarray
    kappa_undefined: bool = False


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def kappa_from_confusion(cm: np.ndarray) -> tuple[float, bool]:
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(np.dot(cm.sum(axis=1), cm.sum(axis=0))) / n ** 2
    if np.isclose(p_e, 1.0, rtol=0.0, atol=1e-15):
        return 0.0, True
    return float((p_o - p_e) / (1.0 - p_e)), False


def metrics(predictions, labels, n_classes: int) -> Metrics:
    """Accuracy, Cohen's kappa (marginal-product chance term) and confusion matrix.

    When chance agreement is 1 kappa is undefined; it is reported as 0 with
    ``kappa_undefined`` set.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ValueError("no trials to score")
    cm = confusion_matrix(predictions, labels, n_classes)
    kappa, undefined = kappa_from_confusion(cm)
    return Metrics(float(np.mean(predictions == labels)), kappa, cm, undefined)


# folds --------------------------------------------------------------------------

def make_folds(labels, k: int) -> np.ndarray:
    """Fold index per trial: the i-th trial of each class (in order) goes to fold i mod k."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            warnings.warn(f"class {c} has {len(idx)} trials, fewer than k={k} folds", stacklevel=2)
        folds[idx] = np.arange(len(idx)) % k
    return folds


# reports --------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    accuracy: float
    n_test: int
    test_indices: list[int]
    val_indices: list[int]
    train_indices: list[int]
    stage1_epochs: int = 0
    stage2_epochs: int = 0
    best_epoch: int = 0


@dataclass
class EvalReport:
    mode: str
    n_classes: int
    fold_results: list[FoldResult]
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    kappa: float
    kappa_undefined: bool = False
    config: dict = field(default_factory=dict)

    @property
    def fold_accuracies(self) -> list[float]:
        return [f.accuracy for f in self.fold_results]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "config": self.config,
            "n_classes": self.n_classes,
            "mean_accuracy": self.mean_accuracy,
            "pooled_accuracy": self.accuracy,
            "kappa": self.kappa,
            "kappa_undefined": self.kappa_undefined,
            "confusion": self.confusion.tolist(),
            "folds": [asdict(f) for f in self.fold_results],
            "predictions": self.predictions.tolist(),
            "labels": self.labels.tolist(),
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


# training hooks --------------------------------------------------------------------

# A trainer maps (train+val dataset, validation indices, config, plan) to a
# predictor: a callable returning labels for an EEGDataset.
Predictor = Callable[[EEGDataset], np.ndarray]
TrainerFn = Callable[[EEGDataset, np.ndarray, ModelConfig, TrainPlan], "tuple[Predictor, dict]"]


class _FBCNetPredictor:
    def __init__(self, model):
        self.model = model

    def __call__(self, ds: EEGDataset) -> np.ndarray:
        return predict(self.model, ds)[0]


def fbcnet_trainer(train_ds: EEGDataset, val_indices, config: ModelConfig, plan: TrainPlan):
    model = build_model(config)
    model, tlog = fit(model, train_ds, plan, val_indices=val_indices)
    info = {"stage1_epochs": tlog.stage1_epochs, "stage2_epochs": tlog.stage2_epochs,
            "best_epoch": tlog.best_epoch}
    return _FBCNetPredictor(model), info


def _run_fold(args):
    dataset, folds, f, k, config, plan, trainer = args
    test_idx = np.flatnonzero(folds == f)
    val_fold = (f + 1) % k
    val_idx = np.flatnonzero(folds == val_fold)
    train_idx = np.flatnonzero((folds != f) & (folds != val_fold))
    pool_idx = np.flatnonzero(folds != f)
    # validation positions are relative to the train+val pool
    val_local = np.flatnonzero(folds[pool_idx] == val_fold)
    predictor, info = trainer(dataset.subset(pool_idx), val_local, config, plan)
    preds = np.asarray(predictor(dataset.subset(test_idx)))
    acc = float(np.mean(preds == dataset.y[test_idx]))
    log.info("fold %d/%d accuracy %.4f", f + 1, k, acc)
    return FoldResult(f, acc, len(test_idx), test_idx.tolist(), val_idx.tolist(),
                      train_idx.tolist(), **info), preds


def _config_echo(config: ModelConfig | None):
    # custom trainers may run without a ModelConfig
    return config.to_dict() if config is not None else None


def run_cv(dataset: EEGDataset, config: ModelConfig, plan: TrainPlan, k: int = 10,
           trainer: TrainerFn | None = None, jobs: int = 1) -> EvalReport:
    """k-fold CV: train on k-1 folds (fold f+1 mod k held out for validation), test on fold f."""
    trainer = trainer or fbcnet_trainer
    folds = make_folds(dataset.y, k)
    tasks = [(dataset, folds, f, k, config, plan, trainer) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]

    predictions = np.empty(dataset.n_trials, dtype=np.int64)
    for fr, preds in results:
        predictions[fr.test_indices] = preds
    m = metrics(predictions, dataset.y, dataset.n_classes)
    return EvalReport("cv", dataset.n_classes, [fr for fr, _ in results], m.confusion,
                      predictions, dataset.y.copy(), m.kappa, m.kappa_undefined,
                      {"model": _config_echo(config), "train": asdict(plan), "k": k})


def run_ho(train_ds: EEGDataset, test_ds: EEGDataset, config: ModelConfig, plan: TrainPlan,
           train_fraction: float = 1.0, val_fraction: float = 0.2,
           trainer: TrainerFn | None = None) -> EvalReport:
    """Train on (a class-stratified fraction of) one session, test on another."""
    check_compatible(train_ds, test_ds)
    trainer = trainer or fbcnet_trainer
    train_ds = subsample_stratified(train_ds, train_fraction)
    val_local = np.flatnonzero(split_validation(train_ds.y, train_ds.n_classes, val_fraction))
    predictor, info = trainer(train_ds, val_local, config, plan)
    preds = np.asarray(predictor(test_ds))
    m = metrics(preds, test_ds.y, test_ds.n_classes)
    fr = FoldResult(0, m.accuracy, test_ds.n_trials, list(range(test_ds.n_trials)),
                    val_local.tolist(), np.setdiff1d(np.arange(train_ds.n_trials), val_local).tolist(),
                    **info)
    return EvalReport("ho", test_ds.n_classes, [fr], m.confusion, preds, test_ds.y.copy(),
                      m.kappa, m.kappa_undefined,
                      {"model": _config_echo(config), "train": asdict(plan),
                       "train_fraction": train_fraction, "val_fraction": val_fraction})
