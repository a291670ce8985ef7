"""Observed-data log posterior of the latent-mixture model and its gradient.

Each unit contributes ``log sum_s Pr(S=s | x) * f_s(y, delta)`` over the
strata compatible with its observed ``(z, d)`` cell, where ``f_s`` is the
survival probability for censored records and the density otherwise.
Constants that do not depend on the parameters (censoring law, covariate
law, assignment mechanism) are dropped, so values are only meaningful up to
an additive constant.
"""
from __future__ import annotations

import math

from typing import NamedTuple

import numpy as np

from .data import Dataset, ObservedUnit, compatible_strata
from .model import (
    MAX_LINEAR_PREDICTOR,
    ParamLayout,
    PriorSpec,
    log_prior,
    log_prior_grad,
    log_strata_probs,
    outcome_terms,
)
from .special import log_sum_exp

__all__ = [
    "LogPosteriorValue",
    "NonFiniteLogPosterior",
    "LogPosterior",
    "unit_log_lik",
    "log_posterior",
    "posterior_strata_probs",
]


class NonFiniteLogPosterior(FloatingPointError):
    """Log posterior is not finite at the supplied parameters."""

    def __init__(self, message: str, unit: str | None = None):
        super().__init__(message)
        self.unit = unit


class LogPosteriorValue(NamedTuple):
    value: float
    gradient: np.ndarray


def _unit_terms(unit: ObservedUnit, theta, layout: ParamLayout):
    strata = compatible_strata(unit.z, unit.d, layout.config)
    if not strata:
        raise ValueError(f"unit {unit.id}: cell (Z={unit.z}, D={unit.d}) has no "
                         "compatible active stratum")
    s_params, t_params = layout.unpack(theta)
    x = np.asarray(unit.x, dtype=float).reshape(1, layout.p)
    log_pi = log_strata_probs(x, s_params, layout.config)[0]
    terms = []
    for s in strata:
        alpha, beta, log_shape = t_params.cell(s, unit.z)
        lin = float(alpha + x[0] @ beta)
        v, _, _ = outcome_terms(layout.family, unit.y, lin, log_shape, bool(unit.delta))
        terms.append(log_pi[layout.config.index(s)] + float(v))
    return strata, np.array(terms)


def unit_log_lik(unit: ObservedUnit, theta, layout: ParamLayout) -> float:
    """Log-likelihood contribution of one unit, mixing over compatible strata."""
    _, terms = _unit_terms(unit, theta, layout)
    return log_sum_exp(terms)


def posterior_strata_probs(unit: ObservedUnit, theta, layout: ParamLayout) -> np.ndarray:
    """Mixture responsibilities over ``layout.config.active_strata``.

    Strata incompatible with the unit's observed cell get probability 0.
    """
    strata, terms = _unit_terms(unit, theta, layout)
    w = np.exp(terms - log_sum_exp(terms))
    out = np.zeros(len(layout.config.active_strata))
    for s, wk in zip(strata, w):
        out[layout.config.index(s)] = wk
    return out / out.sum()


class LogPosterior:
    """Vectorized log posterior bound to one dataset.

    Units are held sorted by id so the summation order, and therefore the
    value, does not depend on the input row order.
    """

    def __init__(self, data: Dataset, layout: ParamLayout, prior: PriorSpec | None = None):
        if data.p != layout.p:
            raise ValueError(f"data has {data.p} covariates, layout expects {layout.p}")
        self.layout = layout
        self.prior = prior or PriorSpec()
        config = layout.config
        order = sorted(range(data.n), key=lambda i: data.ids[i])
        self.ids = tuple(data.ids[i] for i in order)
        self.X = np.ascontiguousarray(data.x[order], dtype=float).reshape(data.n, layout.p)
        z = np.asarray(data.z[order], dtype=int)
        d = np.asarray(data.d[order], dtype=int)
        self.n = data.n
        K = len(config.active_strata)
        compat = np.zeros((self.n, K), dtype=bool)
        group = np.full((self.n, K), -1, dtype=int)
        for k, s in enumerate(config.active_strata):
            for zz in (0, 1):
                rows = (z == zz) & (d == s.d_at(zz))
                compat[rows, k] = True
                group[rows, k] = layout.cell_group[(s, zz)]
        bad = np.flatnonzero(~compat.any(axis=1))
        if bad.size:
            i = bad[0]
            raise ValueError(f"unit {self.ids[i]}: cell (Z={z[i]}, D={d[i]}) has no "
                             "compatible active stratum")
        self.compat = compat
        # every observed cell holds at most two strata: slot A always, slot B maybe
        self.ii, self.kk = np.nonzero(compat)
        self.gg = group[self.ii, self.kk]
        first = np.ones(self.ii.size, dtype=bool)
        first[1:] = self.ii[1:] != self.ii[:-1]
        self.pair_a = np.flatnonzero(first)
        self.pair_b = np.flatnonzero(~first)
        self.has_b = np.zeros(self.n, dtype=bool)
        self.has_b[self.ii[self.pair_b]] = True
        self.y_pair = np.asarray(data.y[order], dtype=float)[self.ii]
        self.cens_pair = np.asarray(data.delta[order], dtype=bool)[self.ii]
        self.log_y_pair = np.log(self.y_pair) if np.all(self.y_pair > 0) else None
        self.X_pair = self.X[self.ii]
        self.K = K
        self.G = len(layout.groups)
        self.n_evals = 0
        events = float(np.sum(np.asarray(data.delta) == 0))
        exposure = float(np.sum(data.y))
        # pooled exponential log event rate; 0.5 keeps it finite with no events
        self.log_event_rate = (math.log((events + 0.5) / exposure) if exposure > 0 else 0.0)

    def init_center(self) -> np.ndarray:
        """Point around which chains are initialized.

        Outcome intercepts sit at the pooled exponential log rate (its negative
        for the lognormal location), so starting hazards match the time unit
        of the data. Everything else is zero.
        """
        center = np.zeros(self.layout.size)
        sign = 1.0 if self.layout.family == "weibull" else -1.0
        center[self.layout.idx_alpha] = sign * self.log_event_rate
        return center

    @property
    def dim(self) -> int:
        return self.layout.size

    def _log_pi(self, s_params):
        layout = self.layout
        X = self.X if layout.p else np.zeros((1, 0))
        eta = np.zeros((X.shape[0], self.K))
        for k, r in enumerate(layout.s_row):
            if r >= 0:
                eta[:, k] = s_params.eta[r] + X @ s_params.xi[r]
        over = np.abs(eta) > MAX_LINEAR_PREDICTOR
        if over.any():
            i = int(np.flatnonzero(over.any(axis=1))[0])
            raise NonFiniteLogPosterior("strata-model linear predictor out of range",
                                        self.ids[i] if layout.p else None)
        return eta - np.logaddexp.reduce(eta, axis=1)[:, None]

    def _forward(self, theta):
        layout = self.layout
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (layout.size,):
            raise ValueError(f"theta must have length {layout.size}")
        if not np.all(np.isfinite(theta)):
            raise NonFiniteLogPosterior("non-finite parameter vector")
        s_params, t_params = layout.unpack(theta)
        log_pi = self._log_pi(s_params)
        gg = self.gg
        lin = t_params.alpha[gg]
        if layout.p:
            lin = lin + np.einsum("ij,ij->i", self.X_pair, t_params.beta[gg])
        over = np.abs(lin) > MAX_LINEAR_PREDICTOR
        if over.any():
            raise NonFiniteLogPosterior("outcome-model linear predictor out of range",
                                        self.ids[self.ii[np.flatnonzero(over)[0]]])
        with np.errstate(over="ignore", invalid="ignore"):
            val, d_lin, d_ls = outcome_terms(layout.family, self.y_pair, lin,
                                             t_params.log_shape[gg], self.cens_pair,
                                             self.log_y_pair)
            if layout.p:
                joint = log_pi[self.ii, self.kk] + val
            else:
                joint = log_pi[0, self.kk] + val
            j_a = joint[self.pair_a]
            j_b = np.full(self.n, -np.inf)
            j_b[self.has_b] = joint[self.pair_b]
            ll = np.logaddexp(j_a, j_b)
        if not np.all(np.isfinite(ll)):
            i = int(np.flatnonzero(~np.isfinite(ll))[0])
            raise NonFiniteLogPosterior("non-finite unit log-likelihood", self.ids[i])
        return theta, log_pi, joint, ll, d_lin, d_ls

    def _pair_resp(self, joint, ll):
        return np.exp(joint - ll[self.ii])

    def value(self, theta) -> float:
        theta, _, _, ll, _, _ = self._forward(theta)
        return float(np.sum(ll)) + log_prior(theta, self.layout, self.prior)

    def unit_values(self, theta) -> np.ndarray:
        """Per-unit log-likelihoods in sorted-id order."""
        return self._forward(theta)[3]

    def responsibilities(self, theta) -> np.ndarray:
        """N x K mixture responsibilities, rows in sorted-id order."""
        _, _, joint, ll, _, _ = self._forward(theta)
        out = np.zeros((self.n, self.K))
        out[self.ii, self.kk] = self._pair_resp(joint, ll)
        return out

    def __call__(self, theta) -> LogPosteriorValue:
        layout = self.layout
        theta, log_pi, joint, ll, d_lin, d_ls = self._forward(theta)
        self.n_evals += 1
        value = float(np.sum(ll)) + log_prior(theta, layout, self.prior)
        rp = self._pair_resp(joint, ll)
        grad = log_prior_grad(theta, layout, self.prior)
        # d log pi_k / d eta_l = 1{k=l} - pi_l; responsibilities sum to one per unit
        pi = np.exp(log_pi)
        r_sum = np.bincount(self.kk, weights=rp, minlength=self.K)
        pi_sum = pi.sum(axis=0) if layout.p else self.n * pi[0]
        for k, r in enumerate(layout.s_row):
            if r >= 0:
                grad[layout.idx_eta[r]] += r_sum[k] - pi_sum[k]
                for j in range(layout.p):
                    rx = np.sum(np.where(self.kk == k, rp * self.X_pair[:, j], 0.0))
                    grad[layout.idx_xi[r, j]] += rx - self.X[:, j] @ pi[:, k]
        with np.errstate(over="ignore", invalid="ignore"):
            g_lin = rp * d_lin
            grad[layout.idx_alpha] += np.bincount(self.gg, weights=g_lin, minlength=self.G)
            grad[layout.idx_log_shape] += np.bincount(self.gg, weights=rp * d_ls,
                                                      minlength=self.G)
            for j in range(layout.p):
                grad[layout.idx_beta[:, j]] += np.bincount(
                    self.gg, weights=g_lin * self.X_pair[:, j], minlength=self.G)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteLogPosterior("non-finite log posterior or gradient")
        return LogPosteriorValue(value, grad)


def log_posterior(data: Dataset, theta, layout: ParamLayout,
                  prior: PriorSpec | None = None) -> LogPosteriorValue:
    """Log posterior (up to a constant) and its exact gradient."""
    return LogPosterior(data, layout, prior)(theta)
