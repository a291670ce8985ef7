"""Synthetic randomized trials with noncompliance and right censoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy import special as _sp

from .data import Dataset, StrataConfig, Stratum
from .model import SModelParams, log_strata_probs

__all__ = [
    "SimScenario",
    "GroundTruth",
    "PRESETS",
    "load_preset",
    "scenario_from_dict",
    "generate",
    "weibull_sample",
    "aft_sample",
    "write_ground_truth",
]

PRESETS = ("sim1_er", "sim2_noer", "sim3_aft_noer", "sim4_scale")


def weibull_sample(phi, alpha, rng=None, x=None, beta=None, size=None, u=None):
    """Draw failure times from the Weibull proportional-hazards law by inversion.

    ``T = (-phi * log(U) * exp(-alpha - x @ beta)) ** (1 / phi)``. Pass ``u``
    to fix the uniforms.
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    lin = np.asarray(alpha, dtype=float)
    if x is not None and beta is not None:
        lin = lin + np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float)
    if u is None:
        shape = size if size is not None else np.broadcast(phi, lin).shape
        u = rng.random(shape)
    u = np.asarray(u, dtype=float)
    out = (-phi * np.log(u) * np.exp(-lin)) ** (1.0 / phi)
    return float(out) if out.ndim == 0 else out


def aft_sample(mu, sigma, rng=None, size=None, normal=None):
    """Lognormal accelerated-failure-time draw ``exp(mu + sigma * N(0, 1))``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    mu = np.asarray(mu, dtype=float)
    if normal is None:
        shape = size if size is not None else np.broadcast(mu, sigma).shape
        normal = rng.standard_normal(shape)
    out = np.exp(mu + sigma * np.asarray(normal, dtype=float))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SimScenario:
    """Truth for a simulated trial.

    ``t_cells`` maps ``(stratum, z)`` to ``{"shape", "intercept"}`` for the
    Weibull family or ``{"mu", "sigma"}`` for the lognormal family, each with
    an optional ``"coefficients"`` list matching ``covariate_names``.
    Covariates, when present, are drawn iid standard normal.
    """

    n: int
    s_model: dict
    t_cells: dict
    family: str = "weibull"
    assignment_prob: float = 0.5
    censoring_rate: float = 0.3
    seed: int = 0
    strata: StrataConfig = field(default_factory=StrataConfig.default)
    covariate_names: tuple[str, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0 < self.assignment_prob < 1:
            raise ValueError("assignment_prob must lie in (0, 1)")
        if not self.censoring_rate > 0:
            raise ValueError("censoring_rate must be positive")
        if self.family not in ("weibull", "lognormal"):
            raise ValueError(f"unknown family {self.family!r}")
        for s in self.strata.active_strata:
            for z in (0, 1):
                if (s, z) not in self.t_cells:
                    raise ValueError(f"missing outcome truth for ({s.label}, z={z})")

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    def s_params(self) -> SModelParams:
        strata = tuple(s for s in self.strata.active_strata
                       if s != self.strata.reference_stratum)
        eta = np.array([self.s_model[s][0] for s in strata], dtype=float)
        xi = np.array([np.asarray(self.s_model[s][1], dtype=float).reshape(self.p)
                       for s in strata]).reshape(len(strata), self.p)
        return SModelParams(strata, eta, xi)

    def strata_probs(self, x=None) -> np.ndarray:
        x = np.zeros((1, self.p)) if x is None else np.atleast_2d(x)
        return np.exp(log_strata_probs(x, self.s_params(), self.strata))

    def _cell(self, s: Stratum, z: int):
        c = self.t_cells[(s, z)]
        beta = np.asarray(c.get("coefficients", np.zeros(self.p)), dtype=float).reshape(self.p)
        return c, beta

    def true_survival(self, s: Stratum, z: int, t, x=None) -> np.ndarray:
        """``Pr(T > t | S=s, Z=z)``, averaged over covariates when ``x`` is given."""
        c, beta = self._cell(Stratum.parse(s), z)
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        xs = np.zeros((1, self.p)) if x is None else np.atleast_2d(x)
        shift = xs @ beta
        if self.family == "weibull":
            lin = c["intercept"] + shift
            val = np.exp(-np.exp(lin)[:, None] * t[None, :] ** c["shape"] / c["shape"])
        else:
            mu = c["mu"] + shift
            with np.errstate(divide="ignore"):
                logt = np.log(t)
            val = _sp.ndtr(-(logt[None, :] - mu[:, None]) / c["sigma"])
        if x is None:
            out = val[0]
        else:
            w = self.strata_probs(xs)[:, self.strata.index(Stratum.parse(s))]
            out = (w @ val) / w.sum()
        return float(out[0]) if scalar else out

    def to_dict(self) -> dict:
        cells = {}
        for (s, z), c in sorted(self.t_cells.items(), key=lambda kv: (kv[0][0].label, kv[0][1])):
            cells.setdefault(s.label, {})[z] = {k: (list(map(float, v)) if k == "coefficients"
                                                    else float(v)) for k, v in c.items()}
        s_model = {}
        for s, (eta, xi) in self.s_model.items():
            entry = {"intercept": float(eta)}
            if self.p:
                entry["coefficients"] = [float(v) for v in np.asarray(xi).reshape(self.p)]
            s_model[s.label] = entry
        return {
            "name": self.name,
            "n": int(self.n),
            "assignment_prob": float(self.assignment_prob),
            "censoring_rate": float(self.censoring_rate),
            "seed": int(self.seed),
            "strata": self.strata.to_dict(),
            "covariates": list(self.covariate_names),
            "s_model": s_model,
            "t_model": {"family": self.family, "cells": cells},
        }


def scenario_from_dict(d: dict) -> SimScenario:
    strata = StrataConfig.from_dict(d.get("strata", {}))
    names = tuple(d.get("covariates", ()) or ())
    p = len(names)
    s_model = {}
    for label, entry in (d.get("s_model") or {}).items():
        s = Stratum.parse(label)
        s_model[s] = (float(entry.get("intercept", 0.0)),
                      np.asarray(entry.get("coefficients", [0.0] * p), dtype=float))
    for s in strata.active_strata:
        if s != strata.reference_stratum and s not in s_model:
            raise ValueError(f"missing strata-model truth for {s.label}")
    tm = d.get("t_model") or {}
    family = tm.get("family", "weibull")
    cells = {}
    for label, arms in (tm.get("cells") or {}).items():
        s = Stratum.parse(label)
        for z, c in arms.items():
            cells[(s, int(z))] = dict(c)
    return SimScenario(
        n=int(d.get("n", 2000)), s_model=s_model, t_cells=cells, family=family,
        assignment_prob=float(d.get("assignment_prob", 0.5)),
        censoring_rate=float(d.get("censoring_rate", 0.3)),
        seed=int(d.get("seed", 0)), strata=strata, covariate_names=names,
        name=str(d.get("name", "custom")))


def load_preset(name: str, **overrides) -> SimScenario:
    """Load a shipped scenario; keyword overrides replace top-level keys."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("pstrata").joinpath("presets").joinpath(f"{name}.yaml").read_text()
    d = yaml.safe_load(text)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return scenario_from_dict(d)


@dataclass(frozen=True)
class GroundTruth:
    ids: tuple[str, ...]
    strata: tuple[Stratum, ...]
    failure_time: np.ndarray
    censoring_time: np.ndarray


def generate(scenario: SimScenario) -> tuple[Dataset, GroundTruth]:
    """Simulate one trial. Deterministic given ``scenario.seed``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([scenario.seed, 1])))
    n, p = scenario.n, scenario.p
    x = rng.standard_normal((n, p)) if p else np.zeros((n, 0))
    z = (rng.random(n) < scenario.assignment_prob).astype(int)
    probs = scenario.strata_probs(x) if p else np.repeat(scenario.strata_probs(), n, axis=0)
    u = rng.random(n)
    k = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)
    active = scenario.strata.active_strata
    strata = tuple(active[i] for i in k)
    d = np.array([s.d_at(zi) for s, zi in zip(strata, z)], dtype=int)

    t = np.empty(n)
    u_t = rng.random(n)
    normals = rng.standard_normal(n)
    for (s, zz), c in scenario.t_cells.items():
        rows = np.flatnonzero((k == active.index(s)) & (z == zz)) if s in active else []
        if not len(rows):
            continue
        _, beta = scenario._cell(s, zz)
        xb = x[rows] @ beta
        if scenario.family == "weibull":
            t[rows] = weibull_sample(c["shape"], c["intercept"] + xb, u=u_t[rows])
        else:
            t[rows] = aft_sample(c["mu"] + xb, c["sigma"], normal=normals[rows])
    cens = rng.exponential(1.0 / scenario.censoring_rate, size=n)
    y = np.minimum(t, cens)
    delta = (t >= cens).astype(int)  # ties count as censored
    ids = tuple(str(i + 1) for i in range(n))
    data = Dataset(ids, x, z, d, y, delta, scenario.covariate_names,
                   {c: (0.0, 1.0) for c in scenario.covariate_names})
    return data, GroundTruth(ids, strata, t, cens)


def write_ground_truth(truth: GroundTruth, path: str | Path, header_lines=()) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "stratum", "failure_time", "censoring_time"])
        for i, s, t, c in zip(truth.ids, truth.strata, truth.failure_time,
                              truth.censoring_time):
            w.writerow([i, s.label, repr(float(t)), repr(float(c))])
    return path
