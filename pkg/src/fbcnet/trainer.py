"""Adam and the two-stage training procedure.

Stage 1 trains on the training split with early stopping on validation
accuracy and restores the best epoch. Stage 2 continues on train + validation
until the loss on the former validation split drops below the stage-1
training loss.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .data import EEGDataset, stratified_head
from .layers import softmax_nll_loss
from .model import FBCNet
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrialSet(NamedTuple):
    views: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "TrialSet":
        return TrialSet(self.views[idx], self.y[idx])


Evaluator = Callable[[FBCNet, np.ndarray, np.ndarray], "tuple[float, float]"]


# optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: Mapping[str, Tensor], state: AdamState,
              constraints: Callable[[], None] | None = None) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``.

    ``constraints`` (e.g. the model's max-norm projection) runs after the update.
    Parameters without a gradient are treated as having zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if constraints is not None:
        constraints()


# plan and log ------------------------------------------------------------------

@dataclass
class TrainPlan:
    batch_size: int = 16
    stage1_max_epochs: int = 1500
    stage2_max_epochs: int = 600
    patience_epochs: int = 200
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage1_max_epochs < 1 or self.stage2_max_epochs < 0:
            raise ValueError("epoch caps must be positive")
        if not 0 < self.patience_epochs < self.stage1_max_epochs:
            raise ValueError("patience_epochs must lie in (0, stage1_max_epochs)")


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    stage1_epochs: int = 0
    stage2_epochs: int = 0
    stage1_final_train_loss: float = float("nan")
    stage1_stop: str = ""
    stage2_stop: str = ""

    def extend(self, other: "TrainLog") -> "TrainLog":
        merged = TrainLog(self.records + other.records)
        for name in ("best_epoch", "best_val_acc", "stage1_epochs", "stage1_final_train_loss",
                     "stage1_stop"):
            setattr(merged, name, getattr(self, name))
        merged.stage2_epochs = other.stage2_epochs
        merged.stage2_stop = other.stage2_stop
        return merged

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "stage", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, r.stage, repr(r.train_loss), repr(r.train_acc),
                        repr(r.val_loss), repr(r.val_acc)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


# evaluation --------------------------------------------------------------------

def evaluate(model: FBCNet, views: np.ndarray, y: np.ndarray, batch_size: int = 64):
    """Eval-mode (loss, accuracy) on a multi-view set; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        total, correct = 0.0, 0
        for start in range(0, len(y), batch_size):
            xb, yb = views[start:start + batch_size], y[start:start + batch_size]
            logits = model.forward_views(xb)
            total += softmax_nll_loss(logits, yb).item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    finally:
        model.training = was_training
    return total / len(y), correct / len(y)


def _train_epoch(model: FBCNet, data: TrialSet, plan: TrainPlan, state: AdamState,
                 rng: np.random.Generator) -> tuple[float, float]:
    model.train()
    params = model.parameters()
    order = rng.permutation(len(data))
    total, correct = 0.0, 0
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        xb, yb = data.views[idx], data.y[idx]
        logits = model.forward_views(xb)
        loss = softmax_nll_loss(logits, yb)
        model.zero_grad()
        loss.backward()
        adam_step(params, state, model.apply_constraints)
        total += loss.item() * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total / len(order), correct / len(order)


# stages ------------------------------------------------------------------------

def train_stage1(model: FBCNet, train: TrialSet, val: TrialSet, plan: TrainPlan,
                 state: AdamState | None = None, rng: np.random.Generator | None = None,
                 evaluator: Evaluator | None = None) -> TrainLog:
    """Early-stopped training; leaves the model (and ``state``) at the best epoch.

    Stops once ``patience_epochs`` epochs pass without a strict improvement of
    the best validation accuracy, or at ``stage1_max_epochs``. Ties keep the
    earliest epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("stage 1 needs non-empty training and validation sets")
    plan.validate()
    state = state if state is not None else AdamState(lr=plan.lr)
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    evaluator = evaluator or evaluate

    tlog = TrainLog()
    best_acc, best_epoch = -np.inf, 0
    best_state, best_opt = model.state_dict(), state.copy()
    epoch = 0
    tlog.stage1_stop = "max_epochs"
    while epoch < plan.stage1_max_epochs:
        epoch += 1
        tr_loss, tr_acc = _train_epoch(model, train, plan, state, rng)
        val_loss, val_acc = evaluator(model, val.views, val.y)
        tlog.records.append(EpochRecord(epoch, 1, tr_loss, tr_acc, val_loss, val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state, best_opt = model.state_dict(), state.copy()
        elif epoch - best_epoch >= plan.patience_epochs:
            tlog.stage1_stop = "patience"
            break
    log.debug("stage 1 stopped at epoch %d (%s), best epoch %d acc %.4f",
              epoch, tlog.stage1_stop, best_epoch, best_acc)

    model.load_state_dict(best_state)
    state.__dict__.update(best_opt.__dict__)
    tlog.best_epoch, tlog.best_val_acc, tlog.stage1_epochs = best_epoch, float(best_acc), epoch
    tlog.stage1_final_train_loss = evaluate(model, train.views, train.y)[0]
    return tlog


def train_stage2(model: FBCNet, full_train: TrialSet, former_val: TrialSet,
                 stage1_final_train_loss: float, plan: TrainPlan,
                 state: AdamState | None = None, rng: np.random.Generator | None = None,
                 evaluator: Evaluator | None = None) -> TrainLog:
    """Continue on train + val until former-val loss < the stage-1 training loss."""
    state = state if state is not None else AdamState(lr=plan.lr)
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    evaluator = evaluator or evaluate
    tlog = TrainLog(stage2_stop="max_epochs")
    epoch = 0
    while epoch < plan.stage2_max_epochs:
        epoch += 1
        tr_loss, tr_acc = _train_epoch(model, full_train, plan, state, rng)
        val_loss, val_acc = evaluator(model, former_val.views, former_val.y)
        tlog.records.append(EpochRecord(epoch, 2, tr_loss, tr_acc, val_loss, val_acc))
        if val_loss < stage1_final_train_loss:
            tlog.stage2_stop = "val_loss_below_stage1_train_loss"
            break
    tlog.stage2_epochs = epoch
    return tlog


def split_validation(y: np.ndarray, n_classes: int, val_fraction: float) -> np.ndarray:
    """Boolean validation mask: the first ceil(n_c * fraction) trials of each class."""
    return stratified_head(y, val_fraction, n_classes)


def fit(model: FBCNet, dataset: EEGDataset | TrialSet, plan: TrainPlan,
        val_fraction: float = 0.2, val_indices=None, n_classes: int | None = None,
        evaluator: Evaluator | None = None) -> tuple[FBCNet, TrainLog]:
    """Split off a validation set, run both stages, return the eval-mode model.

    ``val_indices`` (e.g. a CV fold) overrides the stratified ``val_fraction`` split.
    """
    if isinstance(dataset, EEGDataset):
        data = TrialSet(model.views(dataset), dataset.y)
        n_classes = dataset.n_classes
    else:
        data = dataset
        n_classes = n_classes or model.config.n_classes
    missing = sorted(set(range(n_classes)) - set(np.unique(data.y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} are absent from the training data")

    if val_indices is not None:
        val_mask = np.zeros(len(data), dtype=bool)
        val_mask[np.asarray(val_indices, dtype=np.int64)] = True
    else:
        val_mask = split_validation(data.y, n_classes, val_fraction)
    train, val = data.take(np.flatnonzero(~val_mask)), data.take(np.flatnonzero(val_mask))

    state = AdamState(lr=plan.lr)
    rng = np.random.default_rng(plan.seed)
    log1 = train_stage1(model, train, val, plan, state, rng, evaluator)
    log2 = train_stage2(model, data, val, log1.stage1_final_train_loss, plan, state, rng, evaluator)
    model.eval()
    return model, log1.extend(log2)
