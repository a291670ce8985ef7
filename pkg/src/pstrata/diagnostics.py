"""Convergence diagnostics for multi-chain MCMC output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["split_rhat", "effective_sample_size", "ChainDiagnostics", "summarize_chains"]


def _check(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2:
        raise ValueError("draws must have shape (chains, iterations)")
    if x.shape[0] < 1 or x.shape[1] < 4:
        raise ValueError("need at least one chain with at least 4 draws")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(draws) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is cut in half (the middle draw is dropped for odd lengths),
    so a single chain is enough.
    Returns 1 when every draw is identical. Values below 1, which arise
    from sampling noise when between-chain variance is tiny, are floored at 1.
    """
    x = _split(_check(draws))
    n = x.shape[1]
    w = np.mean(np.var(x, axis=1, ddof=1))
    b = n * np.var(np.mean(x, axis=1), ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(max(1.0, np.sqrt(var_plus / w)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    c = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(c, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(draws) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation.

    Constant input returns the total draw count. The estimate is capped at
    1.5 times the total draw count.
    """
    x = _check(draws)
    m, n = x.shape
    total = m * n
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if var_plus <= 0 or not np.isfinite(var_plus):
        return float(total)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, then enforce monotonicity
    pairs = []
    for t in range(0, n - 1, 2):
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pairs.append(s)
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(total)) if total > 1 else 1.0
    return float(min(total / tau, 1.5 * total))


@dataclass
class ChainDiagnostics:
    names: list[str]
    rhat: np.ndarray
    ess: np.ndarray

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat))

    @property
    def min_ess(self) -> float:
        return float(np.min(self.ess))

    def to_dict(self) -> dict:
        return {
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "parameters": {n: {"rhat": float(r), "ess": float(e)}
                           for n, r, e in zip(self.names, self.rhat, self.ess)},
        }


def summarize_chains(draws: np.ndarray, names) -> ChainDiagnostics:
    """Split R-hat and ESS for every coordinate of a ``(chains, draws, dim)`` array."""
    draws = np.asarray(draws)
    rhat = np.array([split_rhat(draws[:, :, j]) for j in range(draws.shape[2])])
    ess = np.array([effective_sample_size(draws[:, :, j]) for j in range(draws.shape[2])])
    return ChainDiagnostics(list(names), rhat, ess)
