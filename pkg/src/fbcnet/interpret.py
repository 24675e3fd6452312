"""DeepLIFT (Rescale rule) relevance for a trained FBCNet.

Relevance is attributed at the multi-view input, so each score belongs to a
(band, channel, time) cell and subject-level maps are (band, channel).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .data import EEGDataset
from .filterbank import FilterBank, multi_view
from .model import FBCNet

RESCALE_EPS = 1e-7


@dataclass
class RelevanceMap:
    per_input: np.ndarray
    target_class: int
    reference_id: str = ""
    delta_output: float = float("nan")

    @property
    def total(self) -> float:
        return float(self.per_input.sum())


@dataclass
class SubjectRelevance:
    channel_band: np.ndarray
    n_trials: int = 0

    @property
    def band_totals(self) -> np.ndarray:
        return self.channel_band.sum(axis=1)

    def to_text(self, channel_names=None) -> str:
        lines = []
        if channel_names is not None:
            lines.append("# " + " ".join(channel_names))
        lines += [" ".join(f"{v:.10g}" for v in row) for row in self.channel_band]
        lines.append("band_totals " + " ".join(f"{v:.10g}" for v in self.band_totals))
        return "\n".join(lines) + "\n"


def class_reference(dataset: EEGDataset, class_c: int, bank: FilterBank | FBCNet) -> np.ndarray:
    """Mean multi-view representation of all trials of ``class_c``, shape (N_b, C, T)."""
    if isinstance(bank, FBCNet):
        bank = bank.bank
    idx = np.flatnonzero(dataset.y == class_c)
    if idx.size == 0:
        raise ValueError(f"class {class_c} has no trials")
    return multi_view(dataset.X[idx], bank).mean(axis=0)


def _rescale(dy: np.ndarray, dx: np.ndarray, deriv_mid: np.ndarray) -> np.ndarray:
    small = np.abs(dx) < RESCALE_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(small, deriv_mid, dy / np.where(small, 1.0, dx))
    return r


def _log_derivative(v: np.ndarray) -> np.ndarray:
    inside = (v >= L.LOG_FLOOR) & (v <= L.LOG_CEIL)
    return np.where(inside, 1.0 / np.clip(v, L.LOG_FLOOR, L.LOG_CEIL), 0.0)


def _temporal_multiplier(a: np.ndarray, kind: str, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled outputs (2, F, K) and per-sample multipliers (F, K, w) for the pair."""
    aw = a.reshape(a.shape[:2] + (-1, w))
    if kind == "variance":
        centered = aw - aw.mean(axis=-1, keepdims=True)
        out = (centered ** 2).mean(axis=-1)
        # var(x) - var(r) = sum_t [(x_t - mx) + (r_t - mr)] (x_t - r_t) / w exactly
        return out, (centered[0] + centered[1]) / w
    if kind == "average":
        return aw.mean(axis=-1), np.full(aw.shape[1:], 1.0 / w)
    if kind == "max":
        out = aw.max(axis=-1)
        da = aw[0] - aw[1]
        dv = out[0] - out[1]
        norm = (da ** 2).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            mult = np.where(norm > 0, dv[..., None] * da / np.where(norm > 0, norm, 1.0), 0.0)
        return out, mult
    raise ValueError(f"unknown temporal layer {kind!r}")


def deeplift_rescale(model: FBCNet, x_fb: np.ndarray, reference: np.ndarray,
                     target_class: int, reference_id: str = "") -> RelevanceMap:
    """Contribution of each multi-view input cell to the target logit's change.

    Linear stages pass their weights through; elementwise nonlinearities use
    delta-out / delta-in (analytic derivative at the midpoint when the input
    difference is below 1e-7); the windowed variance uses its exact
    linearisation, so contributions sum to logit(x) - logit(reference).
    """
    if model.training:
        raise RuntimeError("deeplift_rescale needs an eval-mode model")
    cfg = model.config
    x_fb = np.asarray(x_fb, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    expected = (cfg.n_bands, cfg.n_channels, cfg.n_samples)
    if x_fb.shape != expected or reference.shape != expected:
        raise ValueError(f"input {x_fb.shape} and reference {reference.shape} must both be {expected}")
    if not 0 <= target_class < cfg.n_classes:
        raise ValueError(f"target class {target_class} outside [0, {cfg.n_classes})")

    nb, m, C, T, w = cfg.n_bands, cfg.m, cfg.n_channels, cfg.n_samples, cfg.w_samples
    F = nb * m
    wconv = model.conv.weight.data.reshape(nb, m, C)
    pair = np.stack([x_fb, reference])

    z = (wconv[None] @ pair).reshape(2, F, T) + model.conv.bias.data[None, :, None]
    bn = model.bn
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    zn = scale[None, :, None] * (z - bn.running_mean[None, :, None]) + bn.beta.data[None, :, None]
    a = L.activation_value(zn, cfg.activation)
    v, temporal_mult = _temporal_multiplier(a, cfg.temporal_kind, w)
    if cfg.log_features:
        feats = np.log(np.clip(v, L.LOG_FLOOR, L.LOG_CEIL))
        log_mult = _rescale(feats[0] - feats[1], v[0] - v[1], _log_derivative(v.mean(axis=0)))
    else:
        feats = v
        log_mult = np.ones_like(v[0])
    logits = feats.reshape(2, -1) @ model.fc_weight.data.T + model.fc_bias.data

    mult_v = model.fc_weight.data[target_class].reshape(F, -1) * log_mult
    mult_a = (mult_v[..., None] * temporal_mult).reshape(F, T)
    act_mult = _rescale(a[0] - a[1], zn[0] - zn[1],
                        L.activation_derivative(zn.mean(axis=0), cfg.activation))
    mult_z = mult_a * act_mult * scale[:, None]
    mult_x = np.swapaxes(wconv, 1, 2) @ mult_z.reshape(nb, m, T)
    contrib = mult_x * (x_fb - reference)
    return RelevanceMap(contrib, target_class, reference_id,
                        float(logits[0, target_class] - logits[1, target_class]))


def subject_relevance(model: FBCNet, dataset: EEGDataset, reference_class: int,
                      target_class: int) -> SubjectRelevance:
    """Average normalised |relevance| of ``target_class`` trials against the
    mean ``reference_class`` trial, collapsed over time to (N_b, C)."""
    reference = class_reference(dataset, reference_class, model.bank)
    idx = np.flatnonzero(dataset.y == target_class)
    if idx.size == 0:
        raise ValueError(f"class {target_class} has no trials")
    views = multi_view(dataset.X[idx], model.bank)
    acc = np.zeros(views.shape[1:3])
    used = 0
    for xv in views:
        r = np.abs(deeplift_rescale(model, xv, reference, target_class,
                                    f"class-{reference_class}-mean").per_input)
        total = r.sum()
        if total > 0:
            acc += r.sum(axis=-1) / total
            used += 1
    if used == 0:
        raise ValueError("every target trial equals the reference; relevance undefined")
    return SubjectRelevance(acc / used, used)
