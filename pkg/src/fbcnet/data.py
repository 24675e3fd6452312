"""EEG trial containers, the on-disk dataset format and a synthetic ERD generator.

Directory format (version 1)::

    meta.txt     key=value lines: format, version, C, T, sample_rate_hz, N_c,
                 n_trials, channel_names (comma separated), subject_id, session_id
    data.f32     little-endian float32, shape (n_trials, C, T), C-order
    labels.txt   one integer label per line, in trial order
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal

FORMAT_NAME = "fbcnet-eeg"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class IncompatibleShapes(ValueError):
    pass


@dataclass
class EEGTrial:
    x: np.ndarray
    y: int
    subject_id: str = ""
    session_id: str = ""


@dataclass
class EEGDataset:
    """Ordered trials sharing one geometry. Trial order drives fold assignment."""

    X: np.ndarray
    y: np.ndarray
    sample_rate_hz: float
    n_classes: int
    channel_names: list[str] = field(default_factory=list)
    subject_id: str = ""
    session_id: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (trials, C, T), got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(f"{self.X.shape[0]} trials but {self.y.shape[0]} labels")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("trial samples must be finite")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.X.shape[1])]
        if len(self.channel_names) != self.X.shape[1]:
            raise ValueError("channel_names length does not match C")

    @property
    def n_trials(self) -> int:
        return self.X.shape[0]

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[2]

    def __len__(self) -> int:
        return self.n_trials

    @property
    def trials(self) -> Iterator[EEGTrial]:
        for x, y in zip(self.X, self.y):
            yield EEGTrial(x, int(y), self.subject_id, self.session_id)

    def subset(self, indices) -> "EEGDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return EEGDataset(self.X[idx], self.y[idx], self.sample_rate_hz, self.n_classes,
                          list(self.channel_names), self.subject_id, self.session_id)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    @classmethod
    def from_trials(cls, trials: Sequence[EEGTrial], sample_rate_hz: float, n_classes: int,
                    channel_names: list[str] | None = None) -> "EEGDataset":
        X = np.stack([t.x for t in trials])
        y = np.array([t.y for t in trials])
        first = trials[0] if trials else EEGTrial(X, 0)
        return cls(X, y, sample_rate_hz, n_classes, channel_names or [],
                   first.subject_id, first.session_id)


def check_compatible(a: EEGDataset, b: EEGDataset) -> None:
    if (a.n_channels, a.n_samples) != (b.n_channels, b.n_samples):
        raise IncompatibleShapes(f"datasets differ in geometry: {(a.n_channels, a.n_samples)} "
                                 f"vs {(b.n_channels, b.n_samples)}")
    if a.sample_rate_hz != b.sample_rate_hz:
        raise IncompatibleShapes(f"datasets differ in sample rate: {a.sample_rate_hz} vs "
                                 f"{b.sample_rate_hz}")
    if a.n_classes != b.n_classes:
        raise IncompatibleShapes(f"datasets differ in class count: {a.n_classes} vs {b.n_classes}")


# on-disk format -------------------------------------------------------------

def save_dataset(ds: EEGDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if any("," in c for c in ds.channel_names):
        raise ValueError("channel names may not contain commas")
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "C": ds.n_channels,
        "T": ds.n_samples,
        "sample_rate_hz": repr(float(ds.sample_rate_hz)),
        "N_c": ds.n_classes,
        "n_trials": ds.n_trials,
        "channel_names": ",".join(ds.channel_names),
        "subject_id": ds.subject_id,
        "session_id": ds.session_id,
    }
    (directory / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    ds.X.astype("<f4").tofile(directory / "data.f32")
    (directory / "labels.txt").write_text("".join(f"{int(v)}\n" for v in ds.y))
    return directory


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def load_dataset(directory) -> EEGDataset:
    directory = Path(directory)
    files = {name: directory / name for name in ("meta.txt", "data.f32", "labels.txt")}
    for name, p in files.items():
        if not p.is_file():
            raise DatasetFormatError(f"missing {name} in dataset directory {directory}")
    meta = _read_meta(files["meta.txt"])
    if meta.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise DatasetFormatError(f"unexpected format {meta.get('format')!r}")
    try:
        version = int(meta["version"])
        C, T, n_c, n = (int(meta[k]) for k in ("C", "T", "N_c", "n_trials"))
        fs = float(meta["sample_rate_hz"])
    except KeyError as exc:
        raise DatasetFormatError(f"meta.txt is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise DatasetFormatError(f"meta.txt has a malformed value: {exc}") from None
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {FORMAT_VERSION})")

    expected = n * C * T * 4
    actual = files["data.f32"].stat().st_size
    if actual != expected:
        raise DatasetFormatError(f"data.f32 has {actual} bytes, expected {expected} "
                                 f"({n} trials x {C} channels x {T} samples x 4)")
    X = np.fromfile(files["data.f32"], dtype="<f4").reshape(n, C, T).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise DatasetFormatError("data.f32 contains NaN or Inf")

    raw = [ln.strip() for ln in files["labels.txt"].read_text().splitlines() if ln.strip()]
    if len(raw) != n:
        raise DatasetFormatError(f"labels.txt has {len(raw)} labels, expected {n}")
    try:
        y = np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError as exc:
        raise DatasetFormatError(f"labels.txt: {exc}") from None
    bad = np.flatnonzero((y < 0) | (y >= n_c))
    if bad.size:
        raise DatasetFormatError(f"labels.txt line {bad[0] + 1}: label {y[bad[0]]} outside [0, {n_c})")

    names = [c for c in meta.get("channel_names", "").split(",") if c] or None
    if names is not None and len(names) != C:
        raise DatasetFormatError(f"{len(names)} channel names for C={C}")
    return EEGDataset(X, y, fs, n_c, names or [], meta.get("subject_id", ""),
                      meta.get("session_id", ""))


# subsampling ----------------------------------------------------------------

def stratified_head(y: np.ndarray, fraction: float, n_classes: int) -> np.ndarray:
    """Boolean mask picking the first ceil(n_c * fraction) trials of each class."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    mask = np.zeros(len(y), dtype=bool)
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        take = min(len(idx), math.ceil(len(idx) * fraction - 1e-9))
        mask[idx[:take]] = True
    return mask


def subsample_stratified(ds: EEGDataset, fraction: float) -> EEGDataset:
    if fraction == 1.0:
        return ds
    return ds.subset(np.flatnonzero(stratified_head(ds.y, fraction, ds.n_classes)))


# synthetic data -------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic ERD/ERS generator.

    Each class ``c`` attenuates the signature-band power of ``target_groups[c]``
    by ``erd_depth`` (fraction of power removed). ``snr`` is the RMS of the
    signature oscillation relative to the unit-RMS background. Background noise
    is white noise through a one-pole lowpass with pole ``noise_pole``.
    """

    n_trials_per_class: int = 100
    n_channels: int = 8
    n_samples: int = 200
    sample_rate_hz: float = 100.0
    n_classes: int = 2
    target_groups: tuple = ((0, 1), (2, 3))
    band_hz: tuple = (8.0, 12.0)
    erd_depth: float = 0.8
    noise_pole: float = 0.9
    snr: float = 2.0
    n_components: int = 3
    amp_jitter: float = 0.1
    amplitude_uv: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.band_hz
        if not 0.0 < lo < hi < self.sample_rate_hz / 2:
            raise ValueError(f"signature band {self.band_hz} must lie inside (0, fs/2)")
        if len(self.target_groups) != self.n_classes:
            raise ValueError("need one target channel group per class")
        for g in self.target_groups:
            if any(not 0 <= ch < self.n_channels for ch in g):
                raise ValueError(f"target group {g} has channels outside [0, {self.n_channels})")
        if not 0.0 <= self.erd_depth <= 1.0:
            raise ValueError("erd_depth must lie in [0, 1]")
        if not 0.0 <= self.noise_pole < 1.0:
            raise ValueError("noise_pole must lie in [0, 1)")
        if self.n_trials_per_class < 1 or self.n_samples < 2 or self.snr < 0:
            raise ValueError("invalid trial count, length or snr")


def generate_synthetic(cfg: SynthConfig) -> EEGDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_trials_per_class * cfg.n_classes
    C, T, fs = cfg.n_channels, cfg.n_samples, cfg.sample_rate_hz
    burn = int(math.ceil(5.0 / max(1.0 - cfg.noise_pole, 1e-3)))

    white = rng.standard_normal((n, C, T + burn))
    background = signal.lfilter([1.0], [1.0, -cfg.noise_pole], white, axis=-1)[..., burn:]
    background *= math.sqrt(1.0 - cfg.noise_pole ** 2)

    # classes interleaved so sequential splits stay balanced
    y = np.arange(n) % cfg.n_classes
    targets = sorted({ch for g in cfg.target_groups for ch in g})
    lo, hi = cfg.band_hz
    margin = min(0.5, (hi - lo) / 4)
    t = np.arange(T) / fs
    amp = cfg.snr * math.sqrt(2.0 / cfg.n_components)

    X = background
    for i in range(n):
        gain = np.ones(C)
        gain[list(cfg.target_groups[y[i]])] = math.sqrt(1.0 - cfg.erd_depth)
        for ch in targets:
            freqs = rng.uniform(lo + margin, hi - margin, cfg.n_components)
            phases = rng.uniform(0.0, 2 * np.pi, cfg.n_components)
            jitter = math.exp(cfg.amp_jitter * rng.standard_normal())
            osc = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
            X[i, ch] += gain[ch] * jitter * amp * osc
    X *= cfg.amplitude_uv
    names = [f"ch{i}" for i in range(C)]
    return EEGDataset(X, y, fs, cfg.n_classes, names, subject_id="synthetic",
                      session_id=str(cfg.seed))
