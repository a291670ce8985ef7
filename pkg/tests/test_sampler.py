import numpy as np
import pytest
from scipy import stats

from conftest import random_dataset
from pstrata.data import StrataConfig
from pstrata.likelihood import LogPosterior
from pstrata.model import ParamLayout
from pstrata.sampler import (
    WORKERS_ENV,
    HmcConfig,
    SamplerError,
    StandardGaussian,
    leapfrog,
    run_chains,
    sample,
)


class Correlated2d:
    def __init__(self, cov):
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)

    def __call__(self, theta):
        g = -self.prec @ theta
        return 0.5 * float(theta @ g), g


class Counting:
    """Wraps a target and records every point it is evaluated at."""

    def __init__(self, target):
        self.target = target
        self.calls = 0

    def __call__(self, theta):
        self.calls += 1
        return self.target(theta)


def test_hmc_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(iterations=100, warmup=100)
    with pytest.raises(ValueError):
        HmcConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        HmcConfig(step_size=-0.1)
    assert HmcConfig().draws_per_chain * HmcConfig().chains == 3000


def test_leapfrog_energy_error_is_second_order():
    target = StandardGaussian(1)
    theta, p = np.array([1.0]), np.array([0.5])
    errs = []
    for eps in (0.1, 0.05, 0.025):
        # same total integration time
        errs.append(abs(leapfrog(theta, p, eps, int(round(1.0 / eps)), target).energy_error))
    assert 3.5 < errs[0] / errs[1] < 4.5
    assert 3.5 < errs[1] / errs[2] < 4.5


def test_leapfrog_small_step_is_continuous():
    target = StandardGaussian(3)
    theta = np.array([0.3, -1.0, 2.0])
    res = leapfrog(theta, np.ones(3), 1e-9, 1, target)
    assert np.allclose(res.theta, theta, atol=1e-8)
    with pytest.raises(ValueError):
        leapfrog(theta, np.ones(3), 0.1, 0, target)
    with pytest.raises(ValueError):
        leapfrog(theta, np.ones(3), 0.1, 1, target, mass_diag=np.zeros(3))


def test_leapfrog_reversible(rng):
    target = Correlated2d([[1.0, 0.6], [0.6, 2.0]])
    mass = np.array([0.7, 1.8])
    for steps in (1, 7, 25):
        theta, p = rng.standard_normal(2), rng.standard_normal(2)
        fwd = leapfrog(theta, p, 0.2, steps, target, mass)
        back = leapfrog(fwd.theta, -fwd.momentum, 0.2, steps, target, mass)
        assert np.allclose(back.theta, theta, atol=1e-8)
        assert np.allclose(back.momentum, -p, atol=1e-8)


def test_leapfrog_flags_non_finite():
    def bad(theta):
        if theta[0] > 0.5:
            return -np.inf, np.zeros(1)
        return -0.5 * float(theta @ theta), -theta

    res = leapfrog(np.array([0.0]), np.array([5.0]), 0.2, 5, bad)
    assert res.divergent and not np.isfinite(res.energy_error)


def test_gaussian_calibration():
    draws = sample(StandardGaussian(5), 5, HmcConfig(seed=3))
    flat = draws.flat()
    assert flat.shape == (3000, 5)
    assert np.all(np.abs(flat.mean(axis=0)) < 0.05)
    assert np.all(np.abs(flat.std(axis=0, ddof=1) - 1) < 0.05)
    assert np.all(np.isfinite(flat))


def test_determinism():
    hmc = HmcConfig(chains=2, iterations=200, warmup=100, seed=99)
    a = sample(StandardGaussian(3), 3, hmc)
    b = sample(StandardGaussian(3), 3, hmc)
    assert a.draws.tobytes() == b.draws.tobytes()
    assert a.log_posterior.tobytes() == b.log_posterior.tobytes()
    c = sample(StandardGaussian(3), 3, HmcConfig(chains=2, iterations=200, warmup=100, seed=98))
    assert not np.array_equal(a.draws, c.draws)


def test_worker_count_invariance(monkeypatch):
    hmc = HmcConfig(chains=3, iterations=150, warmup=75, seed=5)
    serial = sample(StandardGaussian(2), 2, hmc)
    monkeypatch.setenv(WORKERS_ENV, "3")
    parallel = sample(StandardGaussian(2), 2, hmc)
    assert serial.draws.tobytes() == parallel.draws.tobytes()


def test_two_dimensional_chi_square():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    target = Correlated2d(cov)
    draws = sample(target, 2, HmcConfig(chains=4, iterations=3000, warmup=500, seed=17))
    flat = draws.flat()
    assert flat.shape[0] == 10_000
    # whiten, then bin by radius quantile and angle so every cell has equal mass
    white = flat @ np.linalg.inv(np.linalg.cholesky(cov)).T
    u = stats.chi2(2).cdf(np.sum(white ** 2, axis=1))
    ang = (np.arctan2(white[:, 1], white[:, 0]) + np.pi) / (2 * np.pi)
    counts, _, _ = np.histogram2d(u, ang, bins=5, range=[[0, 1], [0, 1]])
    _, pval = stats.chisquare(counts.ravel())
    assert pval > 1e-3


def test_warmup_excluded():
    # with a fixed step size nothing adapts, so kept draws are exactly iterations W..I-1
    base = dict(chains=2, iterations=300, seed=8, step_size=0.4, init_optimize_iters=0)
    long_warm = sample(StandardGaussian(2), 2, HmcConfig(warmup=200, **base))
    short_warm = sample(StandardGaussian(2), 2, HmcConfig(warmup=50, **base))
    assert long_warm.draws.shape == (2, 100, 2)
    assert short_warm.warmup_draws.shape == (2, 50, 2)
    assert np.array_equal(long_warm.draws, short_warm.draws[:, 150:])
    assert np.array_equal(long_warm.warmup_draws[:, 50:], short_warm.draws[:, :150])


def test_evaluation_counter_covers_all_iterations():
    target = Counting(StandardGaussian(2))
    hmc = HmcConfig(chains=1, iterations=40, warmup=20, seed=1, step_size=0.3,
                    max_leapfrog_steps=1, init_optimize_iters=0)
    draws = sample(target, 2, hmc)
    # one initial evaluation plus one per single-step trajectory
    assert target.calls == 1 + 40
    assert draws.draws.shape == (1, 20, 2)


def test_divergences_counted_and_rejected():
    draws = sample(StandardGaussian(4), 4, HmcConfig(chains=2, iterations=200, warmup=100,
                                                     seed=2, step_size=3.5))
    assert draws.divergence_count.sum() > 0
    assert np.all(np.isfinite(draws.draws))


def test_init_failure():
    def never(theta):
        return -np.inf, np.zeros_like(theta)

    with pytest.raises(SamplerError, match="100"):
        sample(never, 2, HmcConfig(chains=1, iterations=10, warmup=5))


def test_thin_and_flat():
    draws = sample(StandardGaussian(2), 2, HmcConfig(chains=2, iterations=100, warmup=50))
    assert draws.n_draws == 100
    thin = draws.thin(20)
    assert thin.n_draws <= 20 and thin.flat().shape[1] == 2


def test_run_chains_on_model(rng):
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg, ["x0"])
    data = random_dataset(rng, 80, 1, cfg)
    draws = run_chains(LogPosterior(data, layout),
                       HmcConfig(chains=2, iterations=120, warmup=60, seed=4))
    assert draws.layout_hash == layout.hash()
    assert draws.names == layout.names()
    assert draws.draws.shape == (2, 60, layout.size)
