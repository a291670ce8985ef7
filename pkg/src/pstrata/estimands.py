"""Posterior causal estimands: stratum survival curves, SPCE, RACE and ITT.

All curves average over the covariates of every unit in the dataset, so
they target the full-population covariate distribution within a stratum.
Each estimand is stored per posterior draw; summaries are computed from the
draws that are not flagged as degenerate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, Stratum
from .model import ParamLayout, log_strata_probs, outcome_terms
from .special import (
    QuadratureGrid,
    log_gamma,
    log_reg_lower_inc_gamma,
    log_sum_exp,
    simpson,
    trapezoid,
)

__all__ = [
    "EstimandError",
    "CurveSummary",
    "SurvivalCurve",
    "EffectCurve",
    "KmCurve",
    "PosteriorModel",
    "default_grid",
    "survival_posterior",
    "spce",
    "race_closed_form",
    "restricted_mean",
    "race_numerical",
    "itt_aggregate",
    "kaplan_meier",
    "weibull_restricted_mean",
]

EXCLUSION_THRESHOLD = 1e-300
_LOG_EXCLUSION = np.log(EXCLUSION_THRESHOLD)
INTEGRATION_RULES = ("closed", "trapezoid", "simpson")


class EstimandError(ValueError):
    pass


@dataclass(frozen=True)
class CurveSummary:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float = 0.95
    n_draws: int = 0


def _summarize(values: np.ndarray, excluded: np.ndarray, level: float) -> CurveSummary:
    keep = values[~excluded]
    if keep.shape[0] == 0:
        nan = np.full(values.shape[1], np.nan)
        return CurveSummary(nan, nan.copy(), nan.copy(), level, 0)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(keep, [tail, 1.0 - tail], axis=0)
    return CurveSummary(keep.mean(axis=0), lo, hi, level, int(keep.shape[0]))


@dataclass
class SurvivalCurve:
    """Posterior of ``G(t; s, z)`` on a time grid, one row per draw."""

    stratum: Stratum
    arm: int
    times: np.ndarray
    per_draw_values: np.ndarray
    excluded: np.ndarray
    evaluator: Callable | None = field(default=None, repr=False, compare=False)

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    def summary(self, level: float = 0.95) -> CurveSummary:
        return _summarize(self.per_draw_values, self.excluded, level)


@dataclass
class EffectCurve:
    """Posterior of a contrast. ``stratum`` is ``None`` for ITT aggregates."""

    stratum: Stratum | None
    kind: str
    times: np.ndarray
    per_draw_values: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    def summary(self, level: float = 0.95) -> CurveSummary:
        return _summarize(self.per_draw_values, self.excluded, level)


def default_grid(data: Dataset, n_points: int = 101, t_max: float | None = None) -> np.ndarray:
    """``n_points`` equally spaced times on ``[0, t_max]``; ``t_max`` defaults to max y."""
    if n_points < 2:
        raise EstimandError("a time grid needs at least two points")
    if t_max is None:
        if data.n == 0:
            raise EstimandError("cannot infer t_max from an empty dataset")
        t_max = float(np.max(data.y))
    if not t_max > 0:
        raise EstimandError("t_max must be positive")
    return np.linspace(0.0, float(t_max), n_points)


def _check_times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise EstimandError("times must be a nonempty 1-d grid")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise EstimandError("times must be finite and nonnegative")
    return t


class PosteriorModel:
    """Posterior draws bound to a dataset's covariates and a parameter layout.

    Units sharing a covariate row are collapsed into one weighted row, so a
    model without covariates costs one row per draw.
    """

    def __init__(self, data: Dataset, theta_draws, layout: ParamLayout):
        theta = np.atleast_2d(np.asarray(theta_draws, dtype=float))
        if theta.shape[1] != layout.size:
            raise EstimandError(f"draws have {theta.shape[1]} parameters, "
                                f"layout expects {layout.size}")
        if data.p != layout.p:
            raise EstimandError(f"data has {data.p} covariates, layout expects {layout.p}")
        if data.n == 0:
            raise EstimandError("dataset is empty")
        self.layout = layout
        self.config = layout.config
        self.theta = theta
        if layout.p:
            rows, counts = np.unique(np.asarray(data.x, dtype=float), axis=0, return_counts=True)
        else:
            rows, counts = np.zeros((1, 0)), np.array([data.n])
        self.rows = rows
        self.log_w = np.log(counts / counts.sum())
        self._params = [layout.unpack(th) for th in theta]
        # per draw: log A_i(s) + log w_i, shape (rows, strata)
        self._log_a = np.stack([log_strata_probs(rows, sp, self.config) + self.log_w[:, None]
                                for sp, _ in self._params])

    @classmethod
    def from_draws(cls, data: Dataset, draws, layout: ParamLayout) -> "PosteriorModel":
        """Build from :class:`~pstrata.sampler.PosteriorDraws`, checking the layout hash."""
        h = getattr(draws, "layout_hash", None)
        if h is not None and h != layout.hash():
            raise EstimandError("draws were produced under a different parameter layout")
        return cls(data, draws.flat(), layout)

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    def _stratum_col(self, s) -> int:
        s = Stratum.parse(s)
        if s not in self.config.active_strata:
            raise EstimandError(f"stratum {s.label} is not active")
        return self.config.index(s)

    def strata_proportions(self) -> np.ndarray:
        """Population stratum shares per draw, ``(draws, strata)``."""
        return np.exp(log_sum_exp(self._log_a, axis=1))

    def _weights(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Normalized unit weights ``A_i / sum A`` per draw, and the exclusion flags."""
        la = self._log_a[:, :, self._stratum_col(s)]
        total = log_sum_exp(la, axis=1)
        excluded = ~(total >= _LOG_EXCLUSION)
        with np.errstate(invalid="ignore"):
            w = np.exp(la - total[:, None])
        w[excluded] = np.exp(self.log_w)
        return w, excluded

    def _lin(self, draw: int, s: Stratum, z: int):
        _, tp = self._params[draw]
        alpha, beta, log_shape = tp.cell(Stratum.parse(s), z)
        return alpha + self.rows @ np.asarray(beta), float(log_shape)

    def unit_survival(self, s, z: int, times) -> np.ndarray:
        """``B_i(t; s, z)`` per draw, row and time: ``(draws, rows, times)``."""
        t = _check_times(times)
        out = np.empty((self.n_draws, self.rows.shape[0], t.size))
        for m in range(self.n_draws):
            lin, ls = self._lin(m, s, z)
            with np.errstate(over="ignore", under="ignore"):
                v, _, _ = outcome_terms(self.layout.family, t[None, :], lin[:, None], ls, True)
            out[m] = np.exp(v)
        return out

    def survival_values(self, s, z: int, times) -> tuple[np.ndarray, np.ndarray]:
        w, excluded = self._weights(s)
        b = self.unit_survival(s, z, times)
        # a leading column of ones yields sum(w) under the same reduction order,
        # so the ratio is exactly 1 wherever every B_i is 1
        b = np.concatenate([np.ones(b.shape[:2] + (1,)), b], axis=2)
        num = np.einsum("mi,mit->mt", w, b)
        g = num[:, 1:] / num[:, :1]
        return np.clip(g, 0.0, 1.0), excluded

    def survival_curve(self, s, z: int, times) -> SurvivalCurve:
        s = Stratum.parse(s)
        if z not in (0, 1):
            raise EstimandError("arm must be 0 or 1")
        t = _check_times(times)
        g, excluded = self.survival_values(s, z, t)
        return SurvivalCurve(s, z, t, g, excluded,
                             evaluator=lambda tt: self.survival_values(s, z, tt)[0])

    def restricted_mean_closed(self, s, z: int, times) -> tuple[np.ndarray, np.ndarray]:
        """``int_0^t G(u; s, z) du`` per draw via the incomplete gamma function."""
        if self.layout.family != "weibull":
            raise EstimandError(f"no closed form for the {self.layout.family!r} family; "
                                "use race_numerical")
        t = _check_times(times)
        w, excluded = self._weights(s)
        out = np.empty((self.n_draws, t.size))
        for m in range(self.n_draws):
            lin, ls = self._lin(m, s, z)
            out[m] = w[m] @ weibull_restricted_mean(lin[:, None], ls, t[None, :])
        return out, excluded

    def population_survival(self, z: int, times) -> np.ndarray:
        """Marginal survival in arm ``z``, mixing units over all active strata."""
        t = _check_times(times)
        total = np.zeros((self.n_draws, t.size))
        for k, s in enumerate(self.config.active_strata):
            a = np.exp(self._log_a[:, :, k])
            total += np.einsum("mi,mit->mt", a, self.unit_survival(s, z, t))
        return total


def weibull_restricted_mean(lin, log_shape, t):
    """``int_0^t exp(-(1/phi) u^phi e^lin) du`` in closed form, evaluated in log space.

    With ``c = e^lin / phi`` this is ``gamma(1/phi, c t^phi) / (phi c^(1/phi))``.
    """
    lin, log_shape, t = np.broadcast_arrays(np.asarray(lin, dtype=float),
                                            np.asarray(log_shape, dtype=float),
                                            np.asarray(t, dtype=float))
    phi = np.exp(log_shape)
    a = 1.0 / phi
    log_c = lin - log_shape
    pos = t > 0
    with np.errstate(divide="ignore"):
        log_x = log_c + phi * np.log(np.where(pos, t, 1.0))
    x = np.exp(np.minimum(log_x, 700.0))
    log_p = np.where(pos, log_reg_lower_inc_gamma(a, np.where(pos, x, 0.0)), -np.inf)
    out = np.exp(log_p + log_gamma(a) - log_shape - log_c / phi)
    out = np.where(pos, out, 0.0)
    return np.minimum(out, t)


def survival_posterior(data: Dataset, draws, layout: ParamLayout, s, z: int,
                       times=None) -> SurvivalCurve:
    """Posterior of ``G(t; s, z)``; ``times`` defaults to :func:`default_grid`."""
    model = PosteriorModel.from_draws(data, draws, layout)
    return model.survival_curve(s, z, default_grid(data) if times is None else times)


def spce(curve1: SurvivalCurve, curve0: SurvivalCurve) -> EffectCurve:
    """Survival probability causal effect ``G(t; s, 1) - G(t; s, 0)`` per draw."""
    if curve1.stratum != curve0.stratum:
        raise EstimandError("curves belong to different strata")
    if curve1.arm != 1 or curve0.arm != 0:
        raise EstimandError("expected the z=1 curve first and the z=0 curve second")
    if curve1.times.shape != curve0.times.shape or not np.array_equal(curve1.times, curve0.times):
        raise EstimandError("time grids differ")
    if curve1.per_draw_values.shape != curve0.per_draw_values.shape:
        raise EstimandError("curves have different numbers of draws")
    return EffectCurve(curve1.stratum, "SPCE", curve1.times.copy(),
                       curve1.per_draw_values - curve0.per_draw_values,
                       curve1.excluded | curve0.excluded)


def race_closed_form(model: PosteriorModel, s, times) -> EffectCurve:
    """Principal RACE via the incomplete-gamma form of the Weibull restricted mean."""
    t = _check_times(times)
    m1, ex1 = model.restricted_mean_closed(s, 1, t)
    m0, ex0 = model.restricted_mean_closed(s, 0, t)
    return EffectCurve(Stratum.parse(s), "RACE", t, m1 - m0, ex1 | ex0)


def restricted_mean(curve: SurvivalCurve, t: float, k: int = 1000,
                    rule: str = "trapezoid") -> np.ndarray:
    """Per-draw ``int_0^t G(u) du`` by the trapezoid or Simpson rule on ``k`` intervals.

    The curve is re-evaluated on the quadrature nodes when it carries an
    evaluator; otherwise its own grid is used and must be the uniform
    ``k``-interval grid on ``[0, t]``.
    """
    if k < 2:
        raise EstimandError("quadrature grid too coarse: k must be at least 2")
    if rule not in ("trapezoid", "simpson"):
        raise EstimandError(f"unknown quadrature rule {rule!r}")
    if not t > 0:
        raise EstimandError("t must be positive")
    if t > curve.times.max() * (1 + 1e-12):
        raise EstimandError(f"t={t} lies beyond the curve's last time {curve.times.max()}")
    grid = QuadratureGrid(float(t), int(k))
    if curve.evaluator is not None:
        values = curve.evaluator(grid.nodes)
    else:
        if curve.times.size != k + 1 or not np.allclose(curve.times, grid.nodes,
                                                         rtol=1e-12, atol=1e-12):
            raise EstimandError("curve has no evaluator and its grid does not match")
        values = curve.per_draw_values
    return simpson(values, grid) if rule == "simpson" else trapezoid(values, grid)


def race_numerical(curve1: SurvivalCurve, curve0: SurvivalCurve, times, k: int = 1000,
                   rule: str = "trapezoid") -> EffectCurve:
    """Principal RACE by numerical integration of the two arm curves."""
    if curve1.stratum != curve0.stratum:
        raise EstimandError("curves belong to different strata")
    t = _check_times(times)
    vals = np.empty((curve1.per_draw_values.shape[0], t.size))
    for j, tj in enumerate(t):
        if tj == 0:
            vals[:, j] = 0.0
            continue
        vals[:, j] = restricted_mean(curve1, tj, k, rule) - restricted_mean(curve0, tj, k, rule)
    return EffectCurve(curve1.stratum, "RACE", t, vals, curve1.excluded | curve0.excluded)


def itt_aggregate(effects: dict, strata_weights, strata_order) -> EffectCurve:
    """``tau(t) = sum_s tau_s(t) Pr(S=s)`` per draw.

    ``strata_weights`` is ``(draws, strata)`` with columns in ``strata_order``.
    """
    order = [Stratum.parse(s) for s in strata_order]
    w = np.atleast_2d(np.asarray(strata_weights, dtype=float))
    if w.shape[1] != len(order):
        raise EstimandError("weight columns do not match the strata order")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise EstimandError("stratum weights must sum to one per draw")
    effects = {Stratum.parse(s): e for s, e in effects.items()}
    missing = [s.label for s in order if s not in effects]
    if missing:
        raise EstimandError(f"missing effects for: {', '.join(missing)}")
    first = effects[order[0]]
    kinds = {e.kind for e in effects.values()}
    if len(kinds) != 1:
        raise EstimandError("cannot aggregate different estimand kinds")
    total = np.zeros_like(first.per_draw_values)
    excluded = np.zeros(total.shape[0], dtype=bool)
    for k, s in enumerate(order):
        e = effects[s]
        if not np.array_equal(e.times, first.times) or e.per_draw_values.shape != total.shape:
            raise EstimandError("effect curves do not share a grid")
        total += w[:, k][:, None] * e.per_draw_values
        excluded |= e.excluded
    return EffectCurve(None, first.kind, first.times.copy(), total, excluded)


@dataclass(frozen=True)
class KmCurve:
    """Product-limit survival estimate for one arm.

    ``times`` are the distinct event times; the estimate is ``1`` before the
    first of them and right-continuous at each.
    """

    arm: int
    times: np.ndarray
    survival: np.ndarray
    variance: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate([[1.0], self.survival])[idx]
        return float(out) if out.ndim == 0 else out

    def variance_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate([[0.0], self.variance])[idx]
        return float(out) if out.ndim == 0 else out


def kaplan_meier(data: Dataset, arm: int) -> KmCurve:
    """Kaplan-Meier estimate with Greenwood variance for units assigned to ``arm``.

    Records with ``delta == 0`` are events; a censoring tied with an event
    time is counted at risk at that time.
    """
    rows = np.flatnonzero(np.asarray(data.z) == arm)
    if rows.size == 0:
        raise EstimandError(f"arm z={arm} has no units")
    y = np.asarray(data.y, dtype=float)[rows]
    event = np.asarray(data.delta)[rows] == 0
    times = np.unique(y[event])
    n_risk = np.array([np.sum(y >= t) for t in times], dtype=float)
    n_event = np.array([np.sum((y == t) & event) for t in times], dtype=float)
    surv = np.cumprod(1.0 - n_event / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n_risk > n_event, n_event / (n_risk * (n_risk - n_event)), 0.0)
    var = surv ** 2 * np.cumsum(terms)
    return KmCurve(arm, times, surv, var, n_risk, n_event)
