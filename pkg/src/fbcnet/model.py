"""FBCNet: filter bank -> depthwise spatial conv -> BN -> activation ->
temporal layer -> log -> linear classifier."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import layers as L
from .data import EEGDataset
from .filterbank import DEFAULT_BANDS, FilterBank, ViewCache, make_filter_bank, multi_view
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FBCN"
CHECKPOINT_VERSION = 1

CONV_MAX_NORM = 2.0
FC_MAX_NORM = 0.5


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_channels: int
    n_samples: int
    sample_rate_hz: float
    n_classes: int
    bands: tuple = DEFAULT_BANDS
    m: int = 32
    w_seconds: float = 1.0
    activation: str = "swish"
    temporal_kind: str = "variance"
    filter_mode: str = "zero-phase"
    transition_hz: float = 2.0
    stop_atten_db: float = 30.0
    pass_ripple_db: float = 3.0
    log_features: bool = True
    seed: int = 0

    def __post_init__(self):
        self.bands = tuple(tuple(float(v) for v in b) for b in self.bands)

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def n_filters(self) -> int:
        return self.m * self.n_bands

    @property
    def w_samples(self) -> int:
        return int(round(self.w_seconds * self.sample_rate_hz))

    @property
    def n_windows(self) -> int:
        return self.n_samples // self.w_samples

    @property
    def n_features(self) -> int:
        return self.n_filters * self.n_windows

    def validate(self) -> None:
        if self.m < 1 or self.n_bands < 1 or self.n_classes < 2:
            raise ConfigError(f"need m >= 1, N_b >= 1, N_c >= 2 (got m={self.m}, "
                              f"N_b={self.n_bands}, N_c={self.n_classes})")
        if self.n_channels < 1 or self.n_samples < 1 or self.sample_rate_hz <= 0:
            raise ConfigError("channels, samples and sample rate must be positive")
        w = self.w_samples
        if w < 1 or self.n_samples % w:
            raise ConfigError(f"window of {self.w_seconds} s = {w} samples does not divide "
                              f"T = {self.n_samples}")
        if self.activation not in L.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.temporal_kind not in L.TEMPORAL_KINDS:
            raise ConfigError(f"unknown temporal layer {self.temporal_kind!r}")
        if self.filter_mode not in ("zero-phase", "causal"):
            raise ConfigError(f"unknown filter mode {self.filter_mode!r}")
        if self.bands and max(hi for _, hi in self.bands) + self.transition_hz >= self.sample_rate_hz / 2:
            raise ConfigError(f"bands up to {max(hi for _, hi in self.bands)} Hz plus transition "
                              f"exceed Nyquist at {self.sample_rate_hz} Hz")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bands"] = [list(b) for b in self.bands]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def expected_parameter_count(cfg: ModelConfig) -> int:
    f = cfg.n_filters
    conv = f * cfg.n_channels + f
    bn = 2 * f
    fc = f * cfg.n_windows * cfg.n_classes + cfg.n_classes
    return conv + bn + fc


class FBCNet:
    """Trainable FBCNet classifier. Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig, bank: FilterBank):
        self.config = config
        self.bank = bank
        F, C = config.n_filters, config.n_channels
        self.conv = L.DepthwiseConvParams(
            Tensor(np.zeros((F, 1, C, 1)), requires_grad=True, name="conv.weight"),
            Tensor(np.zeros(F), requires_grad=True, name="conv.bias"),
            config.m, CONV_MAX_NORM)
        self.bn = L.BatchNormParams.create(F)
        self.fc_weight = Tensor(np.zeros((config.n_classes, config.n_features)),
                                requires_grad=True, name="fc.weight")
        self.fc_bias = Tensor(np.zeros(config.n_classes), requires_grad=True, name="fc.bias")
        self.fc_max_norm = FC_MAX_NORM
        self.training = True
        self.view_cache: ViewCache | None = None

    # parameters ----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {"conv.weight": self.conv.weight, "conv.bias": self.conv.bias,
                "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
                "fc.weight": self.fc_weight, "fc.bias": self.fc_bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        state.update({k: b.copy() for k, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            p.data[...] = state[k]
        for k, b in self.buffers().items():
            b[...] = state[k]

    def apply_constraints(self) -> None:
        L.max_norm_project(self.conv.weight.data, self.conv.max_norm)
        L.max_norm_project(self.fc_weight.data, self.fc_max_norm)

    def train(self) -> "FBCNet":
        self.training = True
        return self

    def eval(self) -> "FBCNet":
        self.training = False
        return self

    # forward -------------------------------------------------------------
    def views(self, X) -> np.ndarray:
        """Multi-view representation of raw trials, (B, N_b, C, T)."""
        X = self._check_input(X)
        if self.view_cache is not None:
            return self.view_cache.get(X, self.bank)
        return multi_view(X, self.bank)

    def _check_input(self, X) -> np.ndarray:
        if isinstance(X, EEGDataset):
            if X.sample_rate_hz != self.config.sample_rate_hz:
                raise ValueError(f"dataset sampled at {X.sample_rate_hz} Hz, model expects "
                                 f"{self.config.sample_rate_hz} Hz")
            X = X.X
        elif isinstance(X, (list, tuple)) and X and hasattr(X[0], "x"):
            X = np.stack([t.x for t in X])
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        cfg = self.config
        if X.ndim != 3 or X.shape[1:] != (cfg.n_channels, cfg.n_samples):
            raise ValueError(f"trials of shape {X.shape[1:] if X.ndim == 3 else X.shape} do not "
                             f"match model geometry (C={cfg.n_channels}, T={cfg.n_samples})")
        return X

    def spatial_block(self, xfb: Tensor) -> Tensor:
        z = L.depthwise_conv(xfb, self.conv.weight, self.conv.bias, self.config.m)
        z = L.batchnorm(z, self.bn, self.training)
        return L.activation(z, self.config.activation)

    def forward_views(self, xfb) -> Tensor:
        """Logits for multi-view input of shape (B, N_b, C, T)."""
        xfb = xfb if isinstance(xfb, Tensor) else Tensor(xfb)
        cfg = self.config
        if xfb.ndim != 4 or xfb.shape[1:] != (cfg.n_bands, cfg.n_channels, cfg.n_samples):
            raise ValueError(f"multi-view input {xfb.shape} does not match "
                             f"(B, {cfg.n_bands}, {cfg.n_channels}, {cfg.n_samples})")
        a = self.spatial_block(xfb)
        v = L.temporal_layer(a, cfg.temporal_kind, cfg.w_samples)
        if cfg.log_features:
            v = L.log_activation(v)
        flat = v.reshape(v.shape[0], -1)
        return L.linear(flat, self.fc_weight, self.fc_bias)

    def forward(self, X) -> Tensor:
        return self.forward_views(self.views(X))

    __call__ = forward

    # checkpoint ----------------------------------------------------------
    def save(self, path) -> None:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
            fh.write(cfg)
            for arr in self.state_dict().values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FBCNet":
        blob = Path(path).read_bytes()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an FBCNet checkpoint")
        version, n = struct.unpack("<II", blob[4:12])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig.from_dict(json.loads(blob[12:12 + n]))
        model = build_model(cfg)
        offset = 12 + n
        state = {}
        for k, arr in model.state_dict().items():
            nbytes = arr.size * 8
            if offset + nbytes > len(blob):
                raise ValueError(f"checkpoint truncated while reading {k}")
            state[k] = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
            offset += nbytes
        if offset != len(blob):
            raise ValueError(f"checkpoint has {len(blob) - offset} trailing bytes")
        model.load_state_dict(state)
        model.eval()
        return model


def build_model(config: ModelConfig) -> FBCNet:
    config.validate()
    bank = make_filter_bank(config.bands, config.sample_rate_hz, config.transition_hz,
                            config.stop_atten_db, config.pass_ripple_db, config.filter_mode)
    model = FBCNet(config, bank)
    rng = np.random.default_rng(config.seed)
    C, D = config.n_channels, config.n_features
    model.conv.weight.data[...] = rng.uniform(-1, 1, model.conv.weight.shape) / np.sqrt(C)
    model.fc_weight.data[...] = rng.uniform(-1, 1, model.fc_weight.shape) / np.sqrt(D)
    model.apply_constraints()
    return model


def forward(model: FBCNet, trials) -> Tensor:
    return model.forward(trials)


def predict(model: FBCNet, trials=None, *, views=None) -> tuple[np.ndarray, np.ndarray]:
    """Labels (argmax, lowest index on ties) and softmax probabilities."""
    if model.training:
        raise RuntimeError("predict() needs an eval-mode model; call model.eval() first")
    logits = model.forward_views(views) if views is not None else model.forward(trials)
    return predict_logits(logits.data)


def predict_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = L.softmax(np.asarray(logits, dtype=np.float64))
    return np.argmax(logits, axis=-1), probs
