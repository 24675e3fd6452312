"""Differentiable FBCNet layers built on :mod:`fbcnet.tensor`.

Batched tensors follow a (batch, feature, 1, time) layout for the spatial
block output, matching the per-trial (m*N_b, 1, T) shape with a leading batch
axis. Unbatched inputs are accepted by the conv and temporal layers too.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _sigmoid, elementwise, record

LOG_FLOOR = 1e-6
LOG_CEIL = 1e6

ACTIVATIONS = ("swish", "elu", "relu", "leaky_relu", "identity")
TEMPORAL_KINDS = ("variance", "average", "max")
LEAKY_SLOPE = 0.01


# spatial convolution -------------------------------------------------------

def depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor, m: int) -> Tensor:
    """Per-band spatial filtering with ``m`` filters per input view.

    x: (N_b, C, T) or (B, N_b, C, T); weight: (m*N_b, 1, C, 1); bias: (m*N_b,).
    Output filter ``j`` reads only view ``j // m``.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ValueError(f"expected input (N_b, C, T) or (B, N_b, C, T), got {x.shape}")
    B, nb, C, T = xd.shape
    F = m * nb
    if weight.shape != (F, 1, C, 1) or bias.shape != (F,):
        raise ValueError(f"conv weight {weight.shape} / bias {bias.shape} do not match "
                         f"input {x.shape} with m={m} (expected ({F}, 1, {C}, 1) and ({F},))")
    w = weight.data.reshape(nb, m, C)
    out = (w[None] @ xd).reshape(B, F, 1, T) + bias.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = (g[None] if unbatched else g).reshape(B, nb, m, T)
        gw = np.einsum("bnmt,bnct->nmc", g4, xd, optimize=True).reshape(F, 1, C, 1)
        gb = g4.sum(axis=(0, 3)).reshape(F)
        gx = None
        if x.requires_grad:
            gx = np.swapaxes(w, 1, 2)[None] @ g4
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    return record(out, (x, weight, bias), backward)


# batch norm ----------------------------------------------------------------

@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, n_features: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(Tensor(np.ones(n_features), requires_grad=True, name="bn.gamma"),
                   Tensor(np.zeros(n_features), requires_grad=True, name="bn.beta"),
                   np.zeros(n_features), np.ones(n_features), momentum, eps)


def batchnorm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Normalise each feature map of a (B, F, 1, T) tensor over batch and time.

    In training mode the batch statistics are used and the running estimates
    are updated in place (unbiased variance, exponential moving average).
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batchnorm expects (B, F, 1, T), got {x.shape}")
    axes = (0, 2, 3)
    gamma = params.gamma.data[None, :, None, None]
    beta = params.beta.data[None, :, None, None]
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if not training:
        inv_std = 1.0 / np.sqrt(params.running_var[None, :, None, None] + params.eps)
        xhat = (xd - params.running_mean[None, :, None, None]) * inv_std
        scale = gamma * inv_std
        out = gamma * xhat + beta

        def eval_backward(g):
            return (g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return record(out, (x, params.gamma, params.beta), eval_backward)

    if n <= 1:
        raise ValueError("batchnorm in training mode needs more than one value per "
                         "feature map (batch * T > 1)")
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (xd - mu) * inv_std
    out = gamma * xhat + beta

    mom = params.momentum
    params.running_mean *= 1.0 - mom
    params.running_mean += mom * mu.reshape(-1)
    params.running_var *= 1.0 - mom
    params.running_var += mom * var.reshape(-1) * n / (n - 1)

    def backward(g):
        gx = gamma * inv_std * (g - g.mean(axis=axes, keepdims=True)
                                - xhat * (g * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, params.gamma, params.beta), backward)


# activations ---------------------------------------------------------------

def activation_value(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "swish":
        return x * _sigmoid(x)
    if kind == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def activation_derivative(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "swish":
        s = _sigmoid(x)
        return s + x * s * (1.0 - s)
    if kind == "elu":
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def activation(x: Tensor, kind: str = "swish") -> Tensor:
    if kind == "swish":
        s = _sigmoid(x.data)
        y = x.data * s
        return record(y, (x,), lambda g: (g * (s + y * (1.0 - s)),))
    y = activation_value(x.data, kind)
    return record(y, (x,), lambda g: (g * activation_derivative(x.data, kind),))


# temporal layers -----------------------------------------------------------

def _windows(x: Tensor, w: int) -> np.ndarray:
    T = x.shape[-1]
    if w < 1 or T % w:
        raise ValueError(f"window {w} does not divide time length {T}")
    return x.data.reshape(x.shape[:-1] + (T // w, w))


def variance_layer(x: Tensor, w: int) -> Tensor:
    """Population variance over non-overlapping windows of ``w`` samples.

    Backward per window: upstream * (2 / w) * (x - window mean).
    """
    xw = _windows(x, w)
    centered = xw - xw.mean(axis=-1, keepdims=True)
    out = (centered ** 2).mean(axis=-1)
    shape = x.shape
    return record(out, (x,), lambda g: (variance_backward(g, centered, w).reshape(shape),))


def variance_backward(upstream: np.ndarray, centered: np.ndarray, w: int) -> np.ndarray:
    """Gradient of windowed variance w.r.t. its input, given cached deviations.

    ``centered`` holds x - mu per window with the window as the last axis.
    """
    return upstream[..., None] * (2.0 / w) * centered


def average_layer(x: Tensor, w: int) -> Tensor:
    xw = _windows(x, w)
    shape = x.shape
    out = xw.mean(axis=-1)
    return record(out, (x,), lambda g: (np.repeat(g / w, w, axis=-1).reshape(shape),))


def max_layer(x: Tensor, w: int) -> Tensor:
    xw = _windows(x, w)
    idx = np.argmax(xw, axis=-1)[..., None]
    out = np.take_along_axis(xw, idx, -1)[..., 0]
    shape = x.shape

    def backward(g):
        gx = np.zeros_like(xw)
        np.put_along_axis(gx, idx, g[..., None], -1)
        return (gx.reshape(shape),)

    return record(out, (x,), backward)


@dataclass(frozen=True)
class TemporalLayerKind:
    kind: str = "variance"
    window_samples: int = 250

    def __post_init__(self):
        if self.kind not in TEMPORAL_KINDS:
            raise ValueError(f"unknown temporal layer {self.kind!r}; choose from {TEMPORAL_KINDS}")


def temporal_layer(x: Tensor, kind: TemporalLayerKind | str, w: int | None = None) -> Tensor:
    if isinstance(kind, TemporalLayerKind):
        kind, w = kind.kind, kind.window_samples
    if w is None:
        raise ValueError("window length required")
    if kind == "variance":
        return variance_layer(x, w)
    if kind == "average":
        return average_layer(x, w)
    if kind == "max":
        return max_layer(x, w)
    raise ValueError(f"unknown temporal layer {kind!r}; choose from {TEMPORAL_KINDS}")


def log_activation(x: Tensor) -> Tensor:
    """ln(clamp(x, 1e-6, 1e6)); zero gradient where the clamp is active."""
    clamped = elementwise("min-with-scalar", elementwise("max-with-scalar", x, LOG_FLOOR), LOG_CEIL)
    return elementwise("ln", clamped)


# classifier ----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map; x is (D,) or (B, D), weight (N_c, D), bias (N_c,)."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: input {x.shape}, weight {weight.shape} and bias "
                         f"{bias.shape} are incompatible")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        return (g @ wd if x.requires_grad else None), g2.T @ x2, g2.sum(axis=0)

    return record(out, (x, weight, bias), backward)


def softmax_nll_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not match")
    n_classes = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return record(np.asarray(loss), (logits,), backward)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# constraints ---------------------------------------------------------------

def max_norm_project(weight: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale each output group (first axis) whose L2 norm exceeds ``max_norm``.

    Operates in place on the raw buffer and returns it.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    flat = weight.reshape(weight.shape[0], -1)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    over = norms > max_norm
    if np.any(over):
        flat[over] *= (max_norm / norms[over])[:, None]
    return weight


@dataclass
class DepthwiseConvParams:
    weight: Tensor
    bias: Tensor
    m: int
    max_norm: float = 2.0
