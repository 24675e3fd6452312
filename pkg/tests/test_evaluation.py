import itertools
import json

import numpy as np
import pytest

from fbcnet.data import EEGDataset, IncompatibleShapes, SynthConfig, generate_synthetic
from fbcnet.evaluation import (confusion_matrix, kappa_from_confusion, make_folds, metrics,
                               run_cv, run_ho)
from fbcnet.trainer import TrainPlan

from conftest import DESK_PLAN, synth_model_config


def toy_dataset(y, C=2, T=60):
    y = np.asarray(y)
    X = np.random.default_rng(0).normal(size=(len(y), C, T))
    X[:, 0, 0] = np.arange(len(y))  # trial id for stub lookup
    return EEGDataset(X, y, 100.0, int(y.max()) + 1)


def oracle_trainer(train_ds, val_idx, config, plan):
    """Predicts the true label by looking it up: an oracle stub."""
    def predict(ds):
        return ds.y.copy()
    return predict, {}


def majority_trainer(train_ds, val_idx, config, plan):
    label = int(np.bincount(train_ds.y).argmax())
    return (lambda ds: np.full(ds.n_trials, label)), {}


# folds ---------------------------------------------------------------------------

def test_folds_alternating():
    y = np.arange(20) % 2
    folds = make_folds(y, 10)
    for f in range(10):
        assert sorted(y[folds == f].tolist()) == [0, 1]


def test_folds_single_class():
    folds = make_folds(np.zeros(10, dtype=int), 5)
    assert np.bincount(folds).tolist() == [2] * 5


def test_folds_bcic_geometry():
    y = np.repeat(np.arange(4), 72)
    np.random.default_rng(0).shuffle(y)
    folds = make_folds(y, 10)
    for c in range(4):
        counts = np.bincount(folds[y == c], minlength=10)
        assert counts.max() - counts.min() <= 1
        # 72 = 7 * 10 + 2: two folds get 8, eight folds get 7
        assert sorted(counts.tolist()) == [7] * 8 + [8] * 2
    assert np.array_equal(folds, make_folds(y.copy(), 10))


def test_folds_errors_and_warning():
    with pytest.raises(ValueError):
        make_folds([0, 1], 1)
    with pytest.warns(UserWarning):
        make_folds([0, 0, 1, 1, 1], 3)


# metrics --------------------------------------------------------------------------

def test_all_correct():
    m = metrics([0, 1, 2, 3], [0, 1, 2, 3], 4)
    assert m.accuracy == 1.0 and m.kappa == 1.0


def balanced_confusion(acc, n_per_class=1000, k=4):
    # each row: acc on the diagonal, the rest spread evenly; column sums stay balanced
    correct = round(acc * n_per_class)
    off = (n_per_class - correct) / (k - 1)
    return np.full((k, k), off) + np.eye(k) * (correct - off)


def test_kappa_reported_pairing():
    kappa, undefined = kappa_from_confusion(balanced_confusion(0.762))
    assert not undefined
    assert abs(kappa - 0.683) <= 0.001
    assert kappa == pytest.approx((0.762 - 0.25) / 0.75, abs=1e-12)


def test_kappa_random_predictions():
    rng = np.random.default_rng(42)
    labels = np.repeat([0, 1, 2, 3], 100)
    preds = rng.integers(0, 4, 400)
    assert abs(metrics(preds, labels, 4).kappa) < 0.1


def test_kappa_undefined_flag():
    m = metrics([1, 1, 1], [1, 1, 1], 2)
    assert m.kappa_undefined and m.kappa == 0.0


def test_metrics_length_mismatch():
    with pytest.raises(ValueError):
        metrics([0, 1], [0, 1, 1], 2)


def test_confusion_invariants():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, 90)
    preds = rng.integers(0, 3, 90)
    m = metrics(preds, labels, 3)
    assert m.confusion.sum(axis=1).tolist() == np.bincount(labels, minlength=3).tolist()
    assert abs(np.trace(m.confusion) / 90 - np.mean(preds == labels)) < 1e-12
    # kappa directly from the label vectors
    p_o = np.mean(preds == labels)
    p_e = sum(np.mean(labels == c) * np.mean(preds == c) for c in range(3))
    assert abs(m.kappa - (p_o - p_e) / (1 - p_e)) < 1e-12
    assert confusion_matrix([2], [0], 3)[0, 2] == 1


# cv/ho with stubs ---------------------------------------------------------------------

def test_cv_perfect_stub():
    ds = toy_dataset(np.arange(40) % 2)
    report = run_cv(ds, None, TrainPlan(), k=10, trainer=oracle_trainer)
    assert report.mean_accuracy == 1.0 and report.kappa == 1.0


def test_cv_majority_stub():
    ds = toy_dataset(np.arange(40) % 2)
    report = run_cv(ds, None, TrainPlan(), k=10, trainer=majority_trainer)
    assert report.accuracy == 0.5
    assert report.kappa == 0.0


def test_cv_index_sets_disjoint():
    ds = toy_dataset(np.arange(30) % 3)
    report = run_cv(ds, None, TrainPlan(), k=5, trainer=oracle_trainer)
    seen_test = []
    for fr in report.fold_results:
        t, v, r = set(fr.test_indices), set(fr.val_indices), set(fr.train_indices)
        assert not (t & v or t & r or v & r)
        assert t | v | r == set(range(30))
        seen_test += fr.test_indices
    assert sorted(seen_test) == list(range(30))


def test_cv_k2_brute_force():
    y = np.array([0, 1, 0, 1])
    ds = toy_dataset(y)
    calls = []

    def recording_trainer(train_ds, val_idx, config, plan):
        ids = train_ds.X[:, 0, 0].astype(int).tolist()
        calls.append((ids, [ids[i] for i in val_idx]))
        return (lambda d: np.zeros(d.n_trials, dtype=int)), {}

    report = run_cv(ds, None, TrainPlan(), k=2, trainer=recording_trainer)
    # folds: trials 0,1 -> fold 0; trials 2,3 -> fold 1. validation fold is (f+1) mod 2
    assert calls == [([2, 3], [2, 3]), ([0, 1], [0, 1])]
    expected = [(f, sorted(i for i in range(4) if i // 2 == f)) for f in range(2)]
    assert [(fr.fold, fr.test_indices) for fr in report.fold_results] == expected
    assert report.predictions.tolist() == [0, 0, 0, 0]


def test_cv_validation_fold_is_next():
    ds = toy_dataset(np.arange(30) % 3)
    report = run_cv(ds, None, TrainPlan(), k=5, trainer=oracle_trainer)
    folds = make_folds(ds.y, 5)
    for fr in report.fold_results:
        assert set(folds[fr.val_indices]) == {(fr.fold + 1) % 5}


def test_ho_fraction_and_compat():
    train = toy_dataset(np.arange(200) % 2)
    test = toy_dataset(np.arange(20) % 2)
    sizes = []

    def t(train_ds, val_idx, config, plan):
        sizes.append((np.bincount(train_ds.y).tolist(), len(val_idx)))
        return (lambda d: d.y.copy()), {}

    report = run_ho(train, test, None, TrainPlan(), train_fraction=0.2, trainer=t)
    assert sizes == [([20, 20], 8)]
    assert report.mean_accuracy == 1.0
    run_ho(train, test, None, TrainPlan(), train_fraction=1.0, trainer=t)
    assert sizes[-1] == ([100, 100], 40)
    with pytest.raises(IncompatibleShapes):
        run_ho(train, toy_dataset([0, 1], C=3), None, TrainPlan(), trainer=t)


def test_report_serialisation(tmp_path):
    ds = toy_dataset(np.arange(20) % 2)
    report = run_cv(ds, None, TrainPlan(), k=5, trainer=majority_trainer)
    report.write(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["schema"] == "fbcnet-eval-report/1"
    assert len(d["folds"]) == 5 and d["mean_accuracy"] == report.mean_accuracy
    assert np.array(d["confusion"]).sum() == 20


# real model -------------------------------------------------------------------------

def test_synthetic_hold_out():
    train = generate_synthetic(SynthConfig(seed=21))
    test = generate_synthetic(SynthConfig(seed=22))
    report = run_ho(train, test, synth_model_config(train, seed=1), TrainPlan(**DESK_PLAN, seed=2))
    assert report.mean_accuracy >= 0.85
