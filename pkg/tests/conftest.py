import numpy as np
import pytest

from mlsurv.data.cohort import Cohort
from mlsurv.encoding import TimeGrid
from mlsurv.network import EncoderConfig, SurvivalModel


def toy_config(**kw):
    base = dict(volume_extents=(4, 4, 4), conv_channels=(3, 3, 4, 4), conv_strides=(1, 1, 2, 2), fc_width=6,
                K=4, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


def toy_grid(K=4):
    return TimeGrid(tuple(float(v) for v in np.arange(1, K) * 0.8))


def toy_model(seed=0, nonzero_heads=True, **kw):
    cfg = toy_config(seed=seed, **kw)
    model = SurvivalModel(cfg, toy_grid(cfg.K))
    if nonzero_heads:
        rng = np.random.default_rng(seed + 100)
        for name, p in model.params.items():
            if name.startswith("mtlr.") or name.endswith(".bias"):
                p.value = rng.normal(size=p.value.shape) * 0.5
    return model


def toy_cohort(n=12, seed=0, extents=(4, 4, 4), S=4, prefix="T"):
    rng = np.random.default_rng(seed)
    times = rng.uniform(0.1, 4.0, size=(n, S))
    events = rng.random((n, S)) < 0.7
    return Cohort([f"{prefix}{i:03d}" for i in range(n)], rng.normal(size=(n, 2) + tuple(extents)),
                  rng.normal(size=(n, 11)), times, events)


@pytest.fixture
def model():
    return toy_model()


@pytest.fixture
def cohort():
    return toy_cohort()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
