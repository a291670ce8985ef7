"""Strata model, outcome model families, priors and the flat parameter layout.

The strata model is a multinomial logit over the active strata with one
reference stratum. The outcome model is specified per parameter *group*, a
set of (stratum, arm) cells that share intercept, coefficients and log-shape;
the exclusion restriction ties the two arms of never-takers and of
always-takers.

Outcome families
----------------
``weibull``
    Proportional hazards with Weibull baseline,
    ``h(t) = t**(phi - 1) * exp(alpha + x @ beta)``, ``phi = exp(log_shape)``.
``lognormal``
    Accelerated failure time, ``log T ~ Normal(alpha + x @ beta, exp(log_shape))``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special as _sp

from .data import StrataConfig, Stratum
from .special import log_sum_exp

__all__ = [
    "FAMILIES",
    "Group",
    "Segment",
    "ParamLayout",
    "SModelParams",
    "TModelParams",
    "PriorSpec",
    "build_groups",
    "strata_probs",
    "log_strata_probs",
    "log_survival",
    "log_density",
    "log_prior",
    "log_prior_grad",
    "outcome_terms",
    "MAX_LINEAR_PREDICTOR",
]

FAMILIES = ("weibull", "lognormal")
MAX_LINEAR_PREDICTOR = 700.0
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class Group(NamedTuple):
    name: str
    cells: tuple[tuple[Stratum, int], ...]


def build_groups(config: StrataConfig) -> list[Group]:
    """Outcome-parameter groups in config stratum order.

    Under the exclusion restriction the two arms of every stratum whose
    treatment receipt ignores assignment share one group.
    """
    groups = []
    for s in config.active_strata:
        tied = config.exclusion_restriction and s.d_at(0) == s.d_at(1)
        if tied:
            groups.append(Group(s.short, ((s, 0), (s, 1))))
        else:
            groups.append(Group(f"{s.short}0", ((s, 0),)))
            groups.append(Group(f"{s.short}1", ((s, 1),)))
    return groups


class Segment(NamedTuple):
    part: str  # "S" or "T"
    owner: str  # stratum label (S) or group name (T)
    role: str  # "intercept" | "coefficients" | "log_shape"
    start: int
    stop: int


@dataclass(frozen=True)
class SModelParams:
    """Multinomial-logit parameters for the non-reference strata.

    ``eta[k]`` and ``xi[k]`` belong to ``strata[k]``; the reference stratum
    is implicit with zero intercept and coefficients.
    """

    strata: tuple[Stratum, ...]
    eta: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True)
class TModelParams:
    family: str
    groups: tuple[Group, ...]
    alpha: np.ndarray
    beta: np.ndarray
    log_shape: np.ndarray

    def group_index(self, s: Stratum, z: int) -> int:
        for g, grp in enumerate(self.groups):
            if (s, z) in grp.cells:
                return g
        raise KeyError(f"no outcome group for ({s.label}, z={z})")

    def cell(self, s: Stratum, z: int):
        g = self.group_index(s, z)
        return self.alpha[g], self.beta[g], self.log_shape[g]

    @property
    def shape(self) -> np.ndarray:
        return np.exp(self.log_shape)


class ParamLayout:
    """Packing of all model parameters into one flat unconstrained vector.

    Strata-model segments come first (intercept then coefficients for each
    non-reference stratum, in config order), followed by outcome groups
    (intercept, coefficients, log-shape).
    """

    def __init__(self, config: StrataConfig, covariate_names=(), family: str = "weibull"):
        if family not in FAMILIES:
            raise ValueError(f"unknown outcome family {family!r}; choose from {FAMILIES}")
        self.config = config
        self.covariate_names = tuple(covariate_names)
        self.p = len(self.covariate_names)
        self.family = family
        self.groups = tuple(build_groups(config))
        self.s_strata = tuple(s for s in config.active_strata if s != config.reference_stratum)
        p = self.p
        segs = []
        pos = 0

        def add(part, owner, role, width):
            nonlocal pos
            segs.append(Segment(part, owner, role, pos, pos + width))
            pos += width

        for s in self.s_strata:
            add("S", s.label, "intercept", 1)
            add("S", s.label, "coefficients", p)
        for g in self.groups:
            add("T", g.name, "intercept", 1)
            add("T", g.name, "coefficients", p)
            add("T", g.name, "log_shape", 1)
        self.segments = tuple(segs)
        self.size = pos

        k, G = len(self.s_strata), len(self.groups)
        stride_s, stride_t = 1 + p, 2 + p
        self.idx_eta = np.arange(k) * stride_s
        self.idx_xi = (self.idx_eta[:, None] + 1 + np.arange(p)[None, :]).reshape(k, p)
        base = k * stride_s
        self.idx_alpha = base + np.arange(G) * stride_t
        self.idx_beta = (self.idx_alpha[:, None] + 1 + np.arange(p)[None, :]).reshape(G, p)
        self.idx_log_shape = self.idx_alpha + 1 + p
        self.idx_intercepts = np.concatenate([self.idx_eta, self.idx_alpha])
        self.idx_coefficients = np.concatenate([self.idx_xi.ravel(), self.idx_beta.ravel()])
        # cell -> group index, and active-stratum position -> S row (-1 for reference)
        self.cell_group = {}
        for gi, g in enumerate(self.groups):
            for cell in g.cells:
                self.cell_group[cell] = gi
        self.s_row = np.array([self.s_strata.index(s) if s in self.s_strata else -1
                               for s in config.active_strata])

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.descriptor() == other.descriptor()

    def __hash__(self) -> int:
        return hash(self.hash())

    def expected_size(self) -> int:
        return (len(self.config.active_strata) - 1) * (1 + self.p) + len(self.groups) * (2 + self.p)

    def names(self) -> list[str]:
        out = []
        for seg in self.segments:
            if seg.role == "coefficients":
                out += [f"{seg.part}[{seg.owner}].coef[{c}]" for c in self.covariate_names]
            else:
                out.append(f"{seg.part}[{seg.owner}].{seg.role}")
        return out

    def descriptor(self) -> dict:
        return {
            "family": self.family,
            "strata": self.config.to_dict(),
            "covariates": list(self.covariate_names),
            "groups": [[g.name, [[s.label, z] for s, z in g.cells]] for g in self.groups],
            "segments": [list(seg) for seg in self.segments],
        }

    def hash(self) -> str:
        blob = json.dumps(self.descriptor(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def unpack(self, theta) -> tuple[SModelParams, TModelParams]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"theta must have length {self.size}, got {theta.shape}")
        s = SModelParams(self.s_strata, theta[self.idx_eta], theta[self.idx_xi])
        t = TModelParams(self.family, self.groups, theta[self.idx_alpha],
                         theta[self.idx_beta], theta[self.idx_log_shape])
        return s, t

    def pack(self, s: SModelParams, t: TModelParams) -> np.ndarray:
        theta = np.empty(self.size)
        theta[self.idx_eta] = s.eta
        theta[self.idx_xi] = np.asarray(s.xi).reshape(self.idx_xi.shape)
        theta[self.idx_alpha] = t.alpha
        theta[self.idx_beta] = np.asarray(t.beta).reshape(self.idx_beta.shape)
        theta[self.idx_log_shape] = t.log_shape
        return theta

    def from_truth(self, s_model: dict, t_model: dict) -> np.ndarray:
        """Build theta from readable dicts.

        ``s_model`` maps stratum -> ``(eta, xi)`` for non-reference strata;
        ``t_model`` maps ``(stratum, z)`` -> ``(alpha, beta, log_shape)``.
        For a tied group any member cell may be given; members must agree.
        """
        p = self.p
        theta = np.zeros(self.size)
        for s, (eta, xi) in s_model.items():
            k = self.s_strata.index(Stratum.parse(s))
            theta[self.idx_eta[k]] = eta
            theta[self.idx_xi[k]] = np.asarray(xi, dtype=float).reshape(p)
        seen = {}
        for (s, z), (alpha, beta, log_shape) in t_model.items():
            g = self.cell_group[(Stratum.parse(s), int(z))]
            vals = (float(alpha), tuple(np.asarray(beta, dtype=float).reshape(p)), float(log_shape))
            if g in seen and seen[g] != vals:
                raise ValueError(f"tied cells of group {self.groups[g].name} disagree")
            seen[g] = vals
            theta[self.idx_alpha[g]] = vals[0]
            theta[self.idx_beta[g]] = vals[1]
            theta[self.idx_log_shape[g]] = vals[2]
        return theta


@dataclass(frozen=True)
class PriorSpec:
    """Normal(0, sd) priors on regression coefficients; flat elsewhere."""

    coefficient_sd: float = 100.0
    outcome_coefficient_sd: float = 100.0

    def __post_init__(self):
        if not (self.coefficient_sd > 0 and self.outcome_coefficient_sd > 0):
            raise ValueError("prior standard deviations must be positive")

    def to_dict(self) -> dict:
        return {"coefficient_sd": self.coefficient_sd,
                "outcome_coefficient_sd": self.outcome_coefficient_sd}


def log_prior(theta, layout: ParamLayout, prior: PriorSpec) -> float:
    """Log prior density up to an additive constant."""
    theta = np.asarray(theta, dtype=float)
    xi = theta[layout.idx_xi] / prior.coefficient_sd
    beta = theta[layout.idx_beta] / prior.outcome_coefficient_sd
    return -0.5 * float(np.sum(xi * xi) + np.sum(beta * beta))


def log_prior_grad(theta, layout: ParamLayout, prior: PriorSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(layout.size)
    g[layout.idx_xi] = -theta[layout.idx_xi] / prior.coefficient_sd ** 2
    g[layout.idx_beta] = -theta[layout.idx_beta] / prior.outcome_coefficient_sd ** 2
    return g


def log_strata_probs(X, s_params: SModelParams, config: StrataConfig) -> np.ndarray:
    """Row-wise log stratum probabilities, columns in ``config.active_strata`` order."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    eta_full = np.zeros((n, len(config.active_strata)))
    for k, s in enumerate(config.active_strata):
        if s == config.reference_stratum:
            continue
        r = s_params.strata.index(s)
        eta_full[:, k] = s_params.eta[r] + X @ np.asarray(s_params.xi[r]).reshape(X.shape[1])
    if not np.all(np.isfinite(eta_full)):
        raise FloatingPointError("non-finite strata-model linear predictor")
    return eta_full - log_sum_exp(eta_full, axis=1)[:, None]


def strata_probs(x, s_params: SModelParams, config: StrataConfig) -> np.ndarray:
    """Stratum probabilities for a single covariate vector."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return np.exp(log_strata_probs(x, s_params, config)[0])


def outcome_terms(family: str, t, lin, log_shape, censored, log_t=None):
    """Per-unit outcome log-likelihood and its partials.

    Returns ``(value, d_value/d_lin, d_value/d_log_shape)`` where ``value`` is
    the log survival for censored entries and the log density otherwise.
    ``lin`` is the linear predictor ``alpha + x @ beta``. ``log_t`` may be
    passed precomputed when every ``t`` is positive.
    """
    t = np.asarray(t, dtype=float)
    lin = np.asarray(lin, dtype=float)
    log_shape = np.asarray(log_shape, dtype=float)
    event = 1.0 - np.asarray(censored, dtype=float)
    if log_t is None:
        has_zero = bool(np.any(t <= 0))
        with np.errstate(divide="ignore"):
            log_t = np.log(t)
    else:
        has_zero = False
    if has_zero:
        # only censored records may sit at t = 0; their survival is exactly 1
        pos = t > 0
        log_t = np.where(pos, log_t, 0.0)
    if family == "weibull":
        phi = np.exp(log_shape)
        phi_log_t = phi * log_t
        H = np.exp(lin + phi_log_t - log_shape)
        if has_zero:
            H = np.where(pos, H, 0.0)
        dH_dls = H * (phi_log_t - 1.0)
        value = event * ((phi - 1.0) * log_t + lin) - H
        d_lin = event - H
        d_ls = event * phi_log_t - dH_dls
        return value, d_lin, d_ls
    if family == "lognormal":
        sigma = np.exp(log_shape)
        zscore = (log_t - lin) / sigma
        if has_zero:
            zscore = np.where(pos, zscore, -np.inf)
        log_sf = _sp.log_ndtr(-zscore)
        log_pdf = -0.5 * zscore ** 2 - _HALF_LOG_2PI
        # inverse Mills ratio phi(z) / (1 - Phi(z))
        mills = np.exp(log_pdf - log_sf)
        with np.errstate(invalid="ignore"):
            zm = zscore * mills
        if has_zero:
            zm = np.where(pos, zm, 0.0)
        cens = 1.0 - event
        value = np.where(cens > 0, log_sf, log_pdf - log_shape - log_t)
        d_lin = np.where(cens > 0, mills / sigma, zscore / sigma)
        d_ls = np.where(cens > 0, zm, zscore ** 2 - 1.0)
        return value, d_lin, d_ls
    raise ValueError(f"unknown outcome family {family!r}")


def _cell_lin(x, t_params: TModelParams, s: Stratum, z: int):
    alpha, beta, log_shape = t_params.cell(s, z)
    x = np.asarray(x, dtype=float).reshape(-1)
    lin = float(alpha + x @ np.asarray(beta).reshape(x.shape[0]))
    if not np.isfinite(lin) or not np.isfinite(log_shape):
        raise FloatingPointError("non-finite outcome-model parameters")
    return lin, float(log_shape)


def log_survival(t: float, s: Stratum, z: int, x, t_params: TModelParams) -> float:
    """``log Pr(T >= t | S=s, Z=z, X=x)``."""
    if not np.isfinite(t) or t < 0:
        raise ValueError("t must be finite and nonnegative")
    lin, ls = _cell_lin(x, t_params, s, z)
    v, _, _ = outcome_terms(t_params.family, t, lin, ls, True)
    return float(v)


def log_density(t: float, s: Stratum, z: int, x, t_params: TModelParams) -> float:
    """Log density of the failure time at ``t``."""
    if not np.isfinite(t) or t < 0:
        raise ValueError("t must be finite and nonnegative")
    lin, ls = _cell_lin(x, t_params, s, z)
    if t == 0:
        if t_params.family == "lognormal":
            return -np.inf
        phi = np.exp(ls)
        if phi < 1:
            raise ValueError("Weibull density diverges at t = 0 when shape < 1")
        return lin if phi == 1 else -np.inf
    v, _, _ = outcome_terms(t_params.family, t, lin, ls, False)
    return float(v)
