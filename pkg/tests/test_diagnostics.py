import numpy as np
import pytest

from pstrata.diagnostics import effective_sample_size, split_rhat, summarize_chains


def _ar1(rng, rho, chains, n):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains)
    eps = rng.standard_normal((chains, n)) * np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + eps[:, t]
    return x


def test_rhat_constant_chains():
    assert split_rhat(np.full((4, 100), 2.5)) == 1.0


def test_rhat_same_distribution(rng):
    assert split_rhat(rng.standard_normal((4, 1000))) < 1.01


def test_rhat_separated_chains(rng):
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert split_rhat(x) > 1.5


def test_rhat_detects_trend_within_one_chain(rng):
    # split halves expose a drifting chain even when chains agree overall
    drift = np.linspace(-3, 3, 1000)
    x = rng.standard_normal((4, 1000)) + drift
    assert split_rhat(x) > 1.2


@pytest.mark.parametrize("shape", [(0, 100), (3, 3), (10,)])
def test_insufficient_draws(shape):
    with pytest.raises(ValueError):
        split_rhat(np.zeros(shape))
    with pytest.raises(ValueError):
        effective_sample_size(np.zeros(shape))


def test_single_chain(rng):
    x = rng.standard_normal((1, 2000))
    assert split_rhat(x) < 1.01
    assert 1500 < effective_sample_size(x) < 2500
    assert split_rhat(np.linspace(-3, 3, 1000)[None]) > 1.5


def test_ess_white_noise(rng):
    x = rng.standard_normal((4, 1000))
    assert abs(effective_sample_size(x) / 4000 - 1) < 0.2


def test_ess_ar1(rng):
    rho = 0.9
    x = _ar1(rng, rho, 4, 5000)
    want = x.size * (1 - rho) / (1 + rho)
    assert abs(effective_sample_size(x) / want - 1) < 0.3


def test_ess_antithetic_is_capped(rng):
    x = _ar1(rng, -0.8, 4, 1000)
    assert effective_sample_size(x) <= 1.5 * x.size


def test_ess_constant():
    assert effective_sample_size(np.ones((3, 50))) == 150


def test_summarize(rng):
    draws = rng.standard_normal((4, 500, 3))
    draws[0, :, 2] += 5
    diag = summarize_chains(draws, ["a", "b", "c"])
    assert diag.rhat.shape == (3,) and diag.max_rhat == diag.rhat[2]
    assert diag.min_ess <= diag.ess[0]
    out = diag.to_dict()
    assert set(out["parameters"]) == {"a", "b", "c"}
    assert all(r >= 1 - 1e-6 for r in diag.rhat)
