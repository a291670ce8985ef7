"""Hamiltonian Monte Carlo with jittered trajectory lengths.

Warmup adapts the step size by dual averaging and a diagonal mass matrix in
windows; both are frozen for the sampling phase. Every random number used by
chain ``c`` at iteration ``i`` comes from a Philox stream keyed by
``(seed, c, i)``, so results do not depend on how chains are scheduled.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import optimize

from .likelihood import LogPosterior, NonFiniteLogPosterior

__all__ = [
    "HmcConfig",
    "PosteriorDraws",
    "SamplerError",
    "LeapfrogResult",
    "leapfrog",
    "sample",
    "run_chains",
    "StandardGaussian",
    "WORKERS_ENV",
]

log = logging.getLogger(__name__)

WORKERS_ENV = "PSTRATA_WORKERS"
DIVERGENCE_THRESHOLD = 1000.0
MAX_INIT_TRIES = 100


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class HmcConfig:
    chains: int = 6
    iterations: int = 1000
    warmup: int = 500
    target_accept: float = 0.8
    max_leapfrog_steps: int = 64
    seed: int = 0
    init_jitter: float = 2.0
    step_size: float | None = None  # fixed step size; disables adaptation
    init_optimize_iters: int = 100  # L-BFGS iterations from the jittered start; 0 disables

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.warmup < 0:
            raise ValueError("chains and iterations must be positive")
        if not self.warmup < self.iterations:
            raise ValueError("warmup must be smaller than iterations")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_leapfrog_steps < 1:
            raise ValueError("max_leapfrog_steps must be positive")
        if self.init_jitter <= 0:
            raise ValueError("init_jitter must be positive")
        if self.init_optimize_iters < 0:
            raise ValueError("init_optimize_iters must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def draws_per_chain(self) -> int:
        return self.iterations - self.warmup

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape ``(chains, draws, dim)``."""

    draws: np.ndarray
    log_posterior: np.ndarray
    accept_stats: np.ndarray
    divergence_count: np.ndarray
    step_size: np.ndarray
    mass: np.ndarray
    names: list[str]
    warmup_divergences: np.ndarray = None
    iterations_run: np.ndarray = None
    layout_hash: str | None = None
    meta: dict = field(default_factory=dict)
    warmup_draws: np.ndarray | None = None

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """All draws stacked chain by chain, shape ``(chains * draws, dim)``."""
        return self.draws.reshape(-1, self.draws.shape[-1])

    def thin(self, n: int) -> "PosteriorDraws":
        """Keep ``n`` draws spread evenly over the flattened sample (for estimands)."""
        idx = np.linspace(0, self.n_draws - 1, n).round().astype(int)
        flat = self.flat()[idx][None]
        lp = self.log_posterior.reshape(-1)[idx][None]
        return PosteriorDraws(flat, lp, self.accept_stats, self.divergence_count,
                              self.step_size, self.mass, self.names,
                              self.warmup_divergences, self.iterations_run,
                              self.layout_hash, dict(self.meta))


class LeapfrogResult(NamedTuple):
    theta: np.ndarray
    momentum: np.ndarray
    energy_error: float
    divergent: bool
    log_p: float
    grad: np.ndarray


def _evaluate(target, theta):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            lp, grad = target(theta)
    except (NonFiniteLogPosterior, FloatingPointError, OverflowError):
        return -np.inf, None
    if not np.isfinite(lp) or grad is None or not np.all(np.isfinite(grad)):
        return -np.inf, None
    return float(lp), np.asarray(grad, dtype=float)


def _integrate(theta, momentum, log_p, grad, step_size, steps, target, inv_mass):
    h0 = -log_p + 0.5 * float(np.sum(momentum * momentum * inv_mass))
    q = theta.copy()
    p = momentum + 0.5 * step_size * grad
    for i in range(steps):
        q = q + step_size * inv_mass * p
        log_p, grad = _evaluate(target, q)
        if grad is None:
            return LeapfrogResult(q, p, np.inf, True, -np.inf, None)
        if i < steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    with np.errstate(over="ignore", invalid="ignore"):
        h1 = -log_p + 0.5 * float(np.sum(p * p * inv_mass))
    err = h1 - h0
    divergent = not np.isfinite(err) or err > DIVERGENCE_THRESHOLD
    return LeapfrogResult(q, p, err, divergent, log_p, grad)


def leapfrog(theta, momentum, step_size: float, steps: int, target: Callable,
             mass_diag=None) -> LeapfrogResult:
    """Integrate Hamiltonian dynamics for ``steps`` leapfrog steps.

    ``target(theta)`` must return ``(log_density, gradient)``. The kinetic
    energy is ``0.5 * sum(p**2 / mass_diag)``. A non-finite Hamiltonian is
    reported through ``divergent``.
    """
    theta = np.asarray(theta, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if steps < 1 or int(steps) != steps:
        raise ValueError("steps must be a positive integer")
    mass = np.ones_like(theta) if mass_diag is None else np.asarray(mass_diag, dtype=float)
    if np.any(mass <= 0):
        raise ValueError("mass_diag must be strictly positive")
    log_p, grad = _evaluate(target, theta)
    if grad is None:
        return LeapfrogResult(theta, momentum, np.inf, True, -np.inf, None)
    return _integrate(theta, momentum, log_p, grad, step_size, int(steps), target, 1.0 / mass)


def _rng(seed: int, chain: int, iteration: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(chain), int(iteration) + 1])
    return np.random.Generator(np.random.Philox(ss))


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_stat: float) -> float:
        self.m += 1
        m = self.m
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m ** -self.kappa
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _initial_step_size(theta, log_p, grad, target, inv_mass, rng):
    """Double or halve a unit step until one-step acceptance crosses 1/2."""
    eps = 1.0
    p = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    res = _integrate(theta, p, log_p, grad, eps, 1, target, inv_mass)
    ratio = -res.energy_error if np.isfinite(res.energy_error) else -np.inf
    direction = 1 if ratio > math.log(0.5) else -1
    for _ in range(60):
        eps_new = eps * 2.0 ** direction
        res = _integrate(theta, p, log_p, grad, eps_new, 1, target, inv_mass)
        ratio = -res.energy_error if np.isfinite(res.energy_error) else -np.inf
        if direction == 1 and not ratio > math.log(0.5):
            break
        eps = eps_new
        if direction == -1 and ratio > math.log(0.5):
            break
    return eps


def _warmup_windows(warmup: int) -> list[int]:
    """Iteration indices after which the mass matrix is re-estimated."""
    if warmup < 20:
        return []
    w1 = int(round(0.15 * warmup))
    w2 = int(round(0.40 * warmup))
    return [w1, w1 + w2]


def _regularized_variance(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    var = np.var(samples, axis=0, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class _UniformInit:
    """Uniform jitter around ``center`` (default zero); log-shape coordinates get half the width."""

    def __init__(self, dim: int, jitter: float, shape_index=None, center=None):
        self.dim = dim
        self.jitter = jitter
        self.shape_index = np.asarray(shape_index if shape_index is not None else [],
                                      dtype=int)
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)

    def __call__(self, rng):
        theta = rng.uniform(-self.jitter, self.jitter, size=self.dim)
        if self.shape_index.size:
            half = self.jitter / 2
            theta[self.shape_index] = rng.uniform(-half, half, size=self.shape_index.size)
        return self.center + theta


def _pre_optimize(target, theta, log_p, grad, maxiter: int):
    """Climb toward a mode before warmup.

    Early warmup transitions from a start far in the tails can overshoot onto
    flat, improper ridges of mixture models; a short quasi-Newton climb keeps
    the chain in the bulk. Falls back to the input point on failure.
    """
    def neg(th):
        v, g = _evaluate(target, th)
        if g is None:
            return 1e300, np.zeros_like(th)
        return -v, -g

    try:
        res = optimize.minimize(neg, theta, jac=True, method="L-BFGS-B",
                                options={"maxiter": maxiter})
    except (ValueError, FloatingPointError):
        return theta, log_p, grad
    lp_new, g_new = _evaluate(target, res.x)
    if g_new is None or not lp_new >= log_p:
        return theta, log_p, grad
    return np.asarray(res.x, dtype=float), lp_new, g_new


def _run_chain(target, dim: int, hmc: HmcConfig, chain: int, init_fn) -> dict:
    init_rng = _rng(hmc.seed, chain, -1)
    for attempt in range(MAX_INIT_TRIES):
        theta = np.asarray(init_fn(init_rng), dtype=float)
        log_p, grad = _evaluate(target, theta)
        if grad is not None:
            break
    else:
        raise SamplerError(f"chain {chain}: no finite log posterior after "
                           f"{MAX_INIT_TRIES} initializations")
    if hmc.init_optimize_iters:
        theta, log_p, grad = _pre_optimize(target, theta, log_p, grad,
                                           hmc.init_optimize_iters)

    inv_mass = np.ones(dim)
    adapt = hmc.step_size is None and hmc.warmup > 0
    if hmc.step_size is not None:
        eps = float(hmc.step_size)
    else:
        eps = _initial_step_size(theta, log_p, grad, target, inv_mass, init_rng)
    da = _DualAveraging(eps, hmc.target_accept)
    windows = _warmup_windows(hmc.warmup) if adapt else []
    window_start = 0

    n_keep = hmc.draws_per_chain
    draws = np.empty((n_keep, dim))
    lps = np.empty(n_keep)
    accept_sum = 0.0
    divergences = 0
    warmup_divergences = 0
    warm_trace = np.empty((hmc.warmup, dim))

    for it in range(hmc.iterations):
        rng = _rng(hmc.seed, chain, it)
        p0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
        steps = int(rng.integers(1, hmc.max_leapfrog_steps + 1))
        u = rng.random()
        res = _integrate(theta, p0, log_p, grad, eps, steps, target, inv_mass)
        if res.divergent:
            accept = 0.0
        else:
            accept = min(1.0, math.exp(-res.energy_error))
            if math.log(u) < -res.energy_error:
                theta, log_p, grad = res.theta, res.log_p, res.grad
        warming = it < hmc.warmup
        if warming:
            warmup_divergences += int(res.divergent)
            warm_trace[it] = theta
            if adapt:
                eps = da.update(accept)
                if windows and it + 1 == windows[0]:
                    windows.pop(0)
                    window = warm_trace[window_start:it + 1]
                    window = window[window.shape[0] // 2:] if window_start == 0 else window
                    inv_mass = _regularized_variance(window)
                    window_start = it + 1
                    eps = _initial_step_size(theta, log_p, grad, target, inv_mass, rng)
                    da = _DualAveraging(eps, hmc.target_accept)
                if it + 1 == hmc.warmup:
                    eps = da.final
        else:
            k = it - hmc.warmup
            draws[k] = theta
            lps[k] = log_p
            accept_sum += accept
            divergences += int(res.divergent)
    return {
        "draws": draws,
        "lp": lps,
        "accept": accept_sum / max(n_keep, 1),
        "divergences": divergences,
        "warmup_divergences": warmup_divergences,
        "step_size": eps,
        "mass": 1.0 / inv_mass,
        "iterations_run": hmc.iterations,
        "warmup_trace": warm_trace,
    }


def _n_workers(chains: int) -> int:
    try:
        w = int(os.environ.get(WORKERS_ENV, "1"))
    except ValueError:
        w = 1
    return max(1, min(w, chains))


def sample(target: Callable, dim: int, hmc: HmcConfig, init_fn: Callable | None = None,
           names: list[str] | None = None, shape_index=None) -> PosteriorDraws:
    """Run ``hmc.chains`` independent chains on an arbitrary differentiable target."""
    init_fn = init_fn or _UniformInit(dim, hmc.init_jitter, shape_index)
    workers = _n_workers(hmc.chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chain, target, dim, hmc, c, init_fn)
                       for c in range(hmc.chains)]
            results = [f.result() for f in futures]
    else:
        results = [_run_chain(target, dim, hmc, c, init_fn) for c in range(hmc.chains)]
    for c, r in enumerate(results):
        log.info("chain %d: accept %.3f, step %.3g, %d divergent", c, r["accept"],
                 r["step_size"], r["divergences"])
    return PosteriorDraws(
        draws=np.stack([r["draws"] for r in results]),
        log_posterior=np.stack([r["lp"] for r in results]),
        accept_stats=np.array([r["accept"] for r in results]),
        divergence_count=np.array([r["divergences"] for r in results], dtype=int),
        step_size=np.array([r["step_size"] for r in results]),
        mass=np.stack([r["mass"] for r in results]),
        names=list(names) if names is not None else [f"theta[{i}]" for i in range(dim)],
        warmup_divergences=np.array([r["warmup_divergences"] for r in results], dtype=int),
        iterations_run=np.array([r["iterations_run"] for r in results], dtype=int),
        meta={"hmc": hmc.to_dict()},
        warmup_draws=np.stack([r["warmup_trace"] for r in results]),
    )


def run_chains(target: LogPosterior, hmc: HmcConfig) -> PosteriorDraws:
    """Sample the posterior of a model-bound :class:`LogPosterior`."""
    layout = target.layout
    init = _UniformInit(layout.size, hmc.init_jitter, layout.idx_log_shape,
                        target.init_center())
    draws = sample(target, layout.size, hmc, init_fn=init, names=layout.names())
    draws.layout_hash = layout.hash()
    return draws


class StandardGaussian:
    """Isotropic Gaussian log density; a calibration target for the sampler."""

    def __init__(self, dim: int, mean=0.0, sd=1.0):
        self.dim = dim
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), (dim,)).copy()

    def __call__(self, theta):
        r = (np.asarray(theta) - self.mean) / self.sd
        return -0.5 * float(r @ r), -r / self.sd
