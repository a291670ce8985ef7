"""Special functions and quadrature used by the likelihood and the estimands.

All functions accept numpy arrays and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

__all__ = [
    "QuadratureGrid",
    "log_sum_exp",
    "log_gamma",
    "reg_lower_inc_gamma",
    "log_reg_lower_inc_gamma",
    "lower_inc_gamma",
    "trapezoid",
    "simpson",
]

_EPS = np.finfo(float).eps
_TINY = 1e-300
_MAX_ITER = 20000


def log_sum_exp(values, axis=None):
    """Numerically stable ``log(sum(exp(values)))``.

    Entries of ``-inf`` are absorbing; if every entry is ``-inf`` the result
    is ``-inf``.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0 and (axis is None or v.shape[axis] == 0):
        raise ValueError("log_sum_exp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)) + m_safe
    out = np.where(np.isneginf(m), -np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_gamma(a):
    """``ln Gamma(a)`` for ``a > 0``."""
    arr = np.asarray(a, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("log_gamma requires a > 0")
    out = _sp.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def _check_domain(a, x):
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(~(a > 0)):
        raise ValueError("incomplete gamma requires a > 0")
    if np.any(~(x >= 0)):
        raise ValueError("incomplete gamma requires x >= 0")
    return np.broadcast_arrays(a, x)


def _series_log(a, x):
    """log P(a, x) by the power series; valid for x < a + 1, x > 0."""
    ap = a.copy()
    term = 1.0 / a
    total = term.copy()
    active = np.ones(a.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ap = ap + 1.0
        term = np.where(active, term * x / ap, term)
        total = np.where(active, total + term, total)
        active &= np.abs(term) >= np.abs(total) * _EPS
        if not active.any():
            break
    return np.log(total) - x + a * np.log(x) - _sp.gammaln(a)


def _cf_log_q(a, x):
    """log Q(a, x) = log(1 - P) by modified Lentz continued fraction; x >= a + 1."""
    b = x + 1.0 - a
    c = np.full(a.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(a.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= _EPS
        if not active.any():
            break
    return np.log(h) - x + a * np.log(x) - _sp.gammaln(a)


def log_reg_lower_inc_gamma(a, x):
    """Logarithm of the regularized lower incomplete gamma ``P(a, x)``.

    Accurate when ``P`` itself would underflow. Series for ``x < a + 1``,
    continued fraction for the complement otherwise.
    """
    a, x = _check_domain(a, x)
    shape = a.shape
    a = a.ravel()
    x = x.ravel()
    out = np.full(a.shape, -np.inf)
    use_series = (x > 0) & (x < a + 1.0)
    use_cf = x >= a + 1.0
    if use_series.any():
        out[use_series] = _series_log(a[use_series], x[use_series])
    if use_cf.any():
        out[use_cf] = np.log1p(-np.exp(_cf_log_q(a[use_cf], x[use_cf])))
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def reg_lower_inc_gamma(a, x):
    """Regularized lower incomplete gamma ``P(a, x) = gamma(a, x) / Gamma(a)``."""
    a, x = _check_domain(a, x)
    shape = a.shape
    a = a.ravel()
    x = x.ravel()
    out = np.zeros(a.shape)
    use_series = (x > 0) & (x < a + 1.0)
    use_cf = x >= a + 1.0
    if use_series.any():
        out[use_series] = np.exp(_series_log(a[use_series], x[use_series]))
    if use_cf.any():
        out[use_cf] = -np.expm1(_cf_log_q(a[use_cf], x[use_cf]))
    out = np.clip(out, 0.0, 1.0).reshape(shape)
    return float(out) if out.ndim == 0 else out


def lower_inc_gamma(a, x):
    """Unregularized ``gamma(a, x) = P(a, x) * Gamma(a)``."""
    out = np.exp(log_reg_lower_inc_gamma(a, x) + _sp.gammaln(np.asarray(a, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class QuadratureGrid:
    """``k + 1`` equally spaced nodes on ``[0, t_end]``."""

    t_end: float
    k: int

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        object.__setattr__(self, "k", int(self.k))

    @property
    def nodes(self) -> np.ndarray:
        return (np.arange(self.k + 1) / self.k) * self.t_end

    @property
    def spacing(self) -> float:
        return self.t_end / self.k


def _check_len(values, grid: QuadratureGrid) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != grid.k + 1:
        raise ValueError(f"expected {grid.k + 1} values on the grid, got {v.shape[-1]}")
    return v


def trapezoid(values, grid: QuadratureGrid):
    """Composite trapezoid rule over the last axis of ``values``."""
    v = _check_len(values, grid)
    out = grid.spacing * np.sum(0.5 * v[..., :-1] + 0.5 * v[..., 1:], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def simpson(values, grid: QuadratureGrid):
    """Composite Simpson rule over the last axis; ``grid.k`` must be even."""
    if grid.k % 2:
        raise ValueError("Simpson's rule needs an even number of subintervals")
    v = _check_len(values, grid)
    s = v[..., 0] + v[..., -1] + 4.0 * np.sum(v[..., 1:-1:2], axis=-1) \
        + 2.0 * np.sum(v[..., 2:-1:2], axis=-1)
    out = grid.spacing / 3.0 * s
    return float(out) if np.ndim(out) == 0 else out
