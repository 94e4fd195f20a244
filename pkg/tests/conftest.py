import numpy as np
import pytest

from tabdiffusion.denoiser import MLPDenoiser
from tabdiffusion.schedule import linear_schedule
from tabdiffusion.trainer import TrainConfig, train

POINT = np.array([1.5, -0.5, 0.8])
PLUS_SHARE = 0.7


@pytest.fixture(scope="session")
def sched():
    return linear_schedule(200, 1e-4, 1e-2)


@pytest.fixture(scope="session")
def point_mass_model(sched):
    m = MLPDenoiser(3, hidden=64, seed=0)
    train(m, sched, np.tile(POINT, (256, 1)), TrainConfig(max_steps=800, batch_size=64, lr=2e-3))
    return m


@pytest.fixture(scope="session")
def two_mode_model(sched):
    rng = np.random.default_rng(0)
    data = rng.choice([-1.0, 1.0], size=(2000, 1), p=[1 - PLUS_SHARE, PLUS_SHARE])
    m = MLPDenoiser(1, hidden=64, seed=0)
    train(m, sched, data, TrainConfig(max_steps=1500, batch_size=128, lr=2e-3))
    return m


@pytest.fixture(scope="session")
def bernoulli_model(sched):
    """MLP fitted to 16 independent Bernoulli features with known p.

    Returns (model, p). Takes a minute or two; shared by the acceptance
    suite and the acceleration tests.
    """
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 16)
    data = (rng.random((10_000, 16)) < p).astype(np.float64)
    m = MLPDenoiser(16, hidden=256, seed=0)
    train(m, sched, data, TrainConfig(max_steps=3000, batch_size=128, lr=1e-3))
    return m, p


@pytest.fixture(scope="session")
def blob_setup(sched):
    """Two standardized 2-d Gaussian classes, a denoiser and a noisy-input classifier.

    Returns (dataset, model, classifier).
    """
    from tabdiffusion.data import two_class_blobs
    from tabdiffusion.guidance import train_classifier

    ds = two_class_blobs(4000, dim=2, separation=4.0, seed=0).standardized()
    m = MLPDenoiser(2, hidden=128, seed=0)
    train(m, sched, ds.features, TrainConfig(max_steps=3000, batch_size=256, lr=2e-3))
    clf = train_classifier(ds.features, ds.labels, sched,
                           TrainConfig(lr=0.01, max_steps=1000, batch_size=128))
    return ds, m, clf


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
