import numpy as np
import pytest

from fbcnet.data import SynthConfig, generate_synthetic
from fbcnet.model import ModelConfig, build_model
from fbcnet.trainer import TrainPlan, TrialSet

# full training plan scaled down by 10 so a 10-fold run fits a desk budget
DESK_PLAN = dict(batch_size=16, stage1_max_epochs=150, stage2_max_epochs=60, patience_epochs=20)


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_channels=3, n_samples=40, sample_rate_hz=100.0, n_classes=2,
                bands=((8, 12), (16, 20)), m=2, w_seconds=0.1, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def synth_model_config(ds, **kw) -> ModelConfig:
    return ModelConfig(ds.n_channels, ds.n_samples, ds.sample_rate_hz, ds.n_classes, **kw)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config())


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(11)
    views = rng.normal(size=(12, 2, 3, 40)) * 3
    return TrialSet(views, np.arange(12) % 2)


@pytest.fixture(scope="session")
def synth_ds():
    return generate_synthetic(SynthConfig(seed=1))


@pytest.fixture
def desk_plan():
    return TrainPlan(**DESK_PLAN, seed=5)


# acceptance reporting: one PASS/FAIL line per criterion, echoed in the summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
