import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pstrata.data import Dataset, StrataConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CONFIGS = [(mono, er) for mono in (True, False) for er in (True, False)]


def random_dataset(rng, n, p, config: StrataConfig, zero_times=False) -> Dataset:
    """Units drawn only into observed cells that some active stratum can produce."""
    z = rng.integers(0, 2, n)
    strata = config.active_strata
    s = [strata[i] for i in rng.integers(0, len(strata), n)]
    d = np.array([si.d_at(zi) for si, zi in zip(s, z)])
    y = rng.exponential(2.0, n) + 0.05
    delta = rng.integers(0, 2, n)
    if zero_times:
        y[delta == 1] = np.where(rng.random(int(np.sum(delta == 1))) < 0.3, 0.0,
                                 y[delta == 1])
    x = rng.standard_normal((n, p))
    names = tuple(f"x{j}" for j in range(p))
    return Dataset(tuple(f"u{i:03d}" for i in range(n)), x, z, d, y, delta, names,
                   {c: (0.0, 1.0) for c in names})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
