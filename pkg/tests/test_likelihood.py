import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import CONFIGS, random_dataset
from pstrata.data import Dataset, ObservedUnit, StrataConfig, Stratum, compatible_strata
from pstrata.likelihood import (
    LogPosterior,
    NonFiniteLogPosterior,
    log_posterior,
    posterior_strata_probs,
    unit_log_lik,
)
from pstrata.model import ParamLayout, PriorSpec, log_prior, log_prior_grad

N, C, A, D = Stratum.NEVER_TAKER, Stratum.COMPLIER, Stratum.ALWAYS_TAKER, Stratum.DEFIER


def _oracle_terms(unit, theta, layout):
    """Joint probability of each compatible stratum, by direct formulas."""
    cfg = layout.config
    s_params, t_params = layout.unpack(theta)
    x = np.asarray(unit.x, dtype=float)
    expo = []
    for s in cfg.active_strata:
        if s == cfg.reference_stratum:
            expo.append(0.0)
        else:
            r = s_params.strata.index(s)
            expo.append(s_params.eta[r] + x @ s_params.xi[r])
    expo = np.array(expo)
    probs = np.exp(expo - expo.max())
    probs /= probs.sum()
    out = {}
    for s in compatible_strata(unit.z, unit.d, cfg):
        alpha, beta, log_shape = t_params.cell(s, unit.z)
        lin = alpha + x @ beta
        if layout.family == "weibull":
            phi = math.exp(log_shape)
            # hazard t^(phi-1) e^lin is a Weibull with shape phi, scale (phi e^-lin)^(1/phi)
            law = stats.weibull_min(phi, scale=(phi * math.exp(-lin)) ** (1 / phi))
        else:
            law = stats.lognorm(math.exp(log_shape), scale=math.exp(lin))
        f = law.sf(unit.y) if unit.delta else law.pdf(unit.y)
        out[s] = probs[cfg.index(s)] * f
    return out


def _random_theta(rng, layout, scale=0.5):
    theta = rng.normal(0, scale, layout.size)
    theta[layout.idx_log_shape] = rng.uniform(-0.5, 0.7, layout.idx_log_shape.size)
    theta[layout.idx_alpha] = rng.uniform(-2.0, 0.5, layout.idx_alpha.size)
    return theta


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
@pytest.mark.parametrize("mono,er", CONFIGS)
def test_unit_log_lik_brute_force(mono, er, family, rng):
    cfg = StrataConfig.default(er, mono)
    layout = ParamLayout(cfg, ["x0", "x1"], family)
    data = random_dataset(rng, 40, 2, cfg)
    lp = LogPosterior(data, layout)
    for _ in range(5):
        theta = _random_theta(rng, layout)
        total = 0.0
        for unit in data:
            want = math.log(sum(_oracle_terms(unit, theta, layout).values()))
            got = unit_log_lik(unit, theta, layout)
            assert got == pytest.approx(want, abs=1e-12, rel=1e-12)
            total += want
        assert lp.value(theta) == pytest.approx(total + log_prior(theta, layout, lp.prior),
                                                rel=1e-12, abs=1e-10)


def test_singleton_cell_collapses():
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg, ["x"])
    theta = _random_theta(np.random.default_rng(1), layout)
    unit = ObservedUnit("u", np.array([0.4]), 0, 1, 1.7, 1)
    s_params, t_params = layout.unpack(theta)
    from pstrata.model import log_strata_probs, log_survival
    want = (log_strata_probs([[0.4]], s_params, cfg)[0, cfg.index(A)]
            + log_survival(1.7, A, 0, [0.4], t_params))
    assert unit_log_lik(unit, theta, layout) == pytest.approx(want, abs=1e-14)
    assert posterior_strata_probs(unit, theta, layout)[cfg.index(A)] == 1.0


def test_censored_at_zero_is_log_mass_of_cell():
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg)
    theta = _random_theta(np.random.default_rng(2), layout)
    unit = ObservedUnit("u", np.zeros(0), 1, 1, 0.0, 1)
    s_params, _ = layout.unpack(theta)
    from pstrata.model import strata_probs
    pi = strata_probs([], s_params, cfg)
    want = math.log(pi[cfg.index(A)] + pi[cfg.index(C)])
    assert unit_log_lik(unit, theta, layout) == pytest.approx(want, abs=1e-14)


def test_empty_compatible_set():
    cfg = StrataConfig((N, C), N)
    layout = ParamLayout(cfg)
    with pytest.raises(ValueError, match="compatible"):
        unit_log_lik(ObservedUnit("u", np.zeros(0), 0, 1, 1.0, 0), np.zeros(layout.size),
                     layout)


def test_empty_dataset():
    layout = ParamLayout(StrataConfig.default(), ["x"])
    data = Dataset((), np.zeros((0, 1)), [], [], [], [], ("x",), {"x": (0.0, 1.0)})
    theta = np.random.default_rng(3).standard_normal(layout.size)
    v = log_posterior(data, theta, layout)
    prior = PriorSpec()
    assert v.value == log_prior(theta, layout, prior)
    assert np.array_equal(v.gradient, log_prior_grad(theta, layout, prior))


def _fd_check(lp, theta):
    val, grad = lp(theta)
    assert grad.shape == theta.shape
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-5
        fd = (lp.value(theta + e) - lp.value(theta - e)) / 2e-5
        if abs(grad[j]) > 1e-8:
            # central differences carry O(h^2) truncation plus cancellation noise
            assert abs(fd - grad[j]) <= 1e-5 * abs(grad[j]) + 1e-7, j
        else:
            assert abs(fd) < 1e-7, j


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
@pytest.mark.parametrize("mono,er", CONFIGS)
def test_gradient_finite_differences(mono, er, family):
    cfg = StrataConfig.default(er, mono)
    rng = np.random.default_rng([int(mono), int(er), family == "weibull"])
    for rep in range(25):
        p = int(rng.integers(0, 3))
        layout = ParamLayout(cfg, [f"x{j}" for j in range(p)], family)
        data = random_dataset(rng, 10, p, cfg, zero_times=rep % 5 == 0)
        lp = LogPosterior(data, layout, PriorSpec(2.0, 3.0))
        _fd_check(lp, _random_theta(rng, layout))


def test_permutation_invariance(rng):
    cfg = StrataConfig.default(False, False)
    layout = ParamLayout(cfg, ["x0", "x1"])
    data = random_dataset(rng, 60, 2, cfg)
    theta = _random_theta(rng, layout)
    base = log_posterior(data, theta, layout)
    for _ in range(5):
        perm = data.subset(rng.permutation(data.n))
        v = log_posterior(perm, theta, layout)
        assert v.value == base.value
        assert np.array_equal(v.gradient, base.gradient)


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 5.0), st.floats(0.0, 5.0))
def test_censored_term_nonincreasing_in_y(seed, y, dy):
    rng = np.random.default_rng(seed)
    layout = ParamLayout(StrataConfig.default(), ["x"])
    theta = _random_theta(rng, layout)
    x = rng.standard_normal(1)
    u1 = ObservedUnit("u", x, 1, 1, y, 1)
    u2 = ObservedUnit("u", x, 1, 1, y + dy, 1)
    assert unit_log_lik(u2, theta, layout) <= unit_log_lik(u1, theta, layout) + 1e-15


def test_mixture_collapse():
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg, ["x"])
    theta = np.zeros(layout.size)
    theta[layout.idx_alpha] = -1.0
    theta[layout.idx_log_shape] = 0.3
    theta[layout.idx_beta] = 0.2
    theta[layout.idx_eta[layout.s_strata.index(C)]] = 60.0  # complier share ~ 1
    unit = ObservedUnit("u", np.array([0.5]), 1, 1, 2.0, 0)
    from pstrata.model import log_density
    _, t_params = layout.unpack(theta)
    want = log_density(2.0, C, 1, [0.5], t_params)
    assert unit_log_lik(unit, theta, layout) == pytest.approx(want, abs=1e-15)


def test_responsibilities_examples():
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg)
    theta = np.zeros(layout.size)
    # equal shares for c and a, identical outcome laws
    unit = ObservedUnit("u", np.zeros(0), 1, 1, 1.2, 0)
    r = posterior_strata_probs(unit, theta, layout)
    assert r[cfg.index(C)] == pytest.approx(0.5, abs=1e-15)
    assert r[cfg.index(A)] == pytest.approx(0.5, abs=1e-15)
    assert r[cfg.index(N)] == 0.0
    rng = np.random.default_rng(4)
    for _ in range(20):
        theta = _random_theta(rng, layout)
        for z, d in ((0, 0), (1, 1)):
            unit = ObservedUnit("u", np.zeros(0), z, d, float(rng.exponential(2)),
                                int(rng.integers(0, 2)))
            joint = _oracle_terms(unit, theta, layout)
            total = sum(joint.values())
            r = posterior_strata_probs(unit, theta, layout)
            assert abs(r.sum() - 1) < 1e-12
            for s, v in joint.items():
                assert r[cfg.index(s)] == pytest.approx(v / total, abs=1e-12)


def test_vectorized_responsibilities_match_scalar(rng):
    cfg = StrataConfig.default(False, False)
    layout = ParamLayout(cfg, ["x0"])
    data = random_dataset(rng, 30, 1, cfg)
    lp = LogPosterior(data, layout)
    theta = _random_theta(rng, layout)
    resp = lp.responsibilities(theta)
    by_id = {u.id: u for u in data}
    for i, uid in enumerate(lp.ids):
        assert np.allclose(resp[i], posterior_strata_probs(by_id[uid], theta, layout),
                           atol=1e-12)


def test_overflow_guard_rejects():
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg)
    data = random_dataset(np.random.default_rng(5), 10, 0, cfg)
    theta = np.zeros(layout.size)
    theta[layout.idx_alpha[0]] = 800.0
    with pytest.raises(NonFiniteLogPosterior):
        log_posterior(data, theta, layout)
    theta[layout.idx_alpha[0]] = np.nan
    with pytest.raises(NonFiniteLogPosterior):
        log_posterior(data, theta, layout)


def test_covariate_count_mismatch(rng):
    cfg = StrataConfig.default()
    with pytest.raises(ValueError):
        LogPosterior(random_dataset(rng, 5, 2, cfg), ParamLayout(cfg, ["x0"]))


@pytest.mark.parametrize("family, sign", [("weibull", 1.0), ("lognormal", -1.0)])
def test_init_center(rng, family, sign):
    cfg = StrataConfig.default()
    layout = ParamLayout(cfg, ["x0"], family)
    data = random_dataset(rng, 40, 1, cfg)
    lp = LogPosterior(data, layout)
    rate = (np.sum(data.delta == 0) + 0.5) / np.sum(data.y)
    center = lp.init_center()
    assert np.allclose(center[layout.idx_alpha], sign * math.log(rate), atol=1e-12)
    rest = np.setdiff1d(np.arange(layout.size), layout.idx_alpha)
    assert np.all(center[rest] == 0)
