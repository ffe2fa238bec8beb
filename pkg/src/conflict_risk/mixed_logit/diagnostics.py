"""Post-estimation arithmetic: sigmas, correlations, LR tests and fit indices."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm


class ZeroSigma(ValueError):
    pass


class NegativeStatistic(UserWarning):
    pass


def _lower(gamma) -> np.ndarray:
    """Accept ragged row lists such as ``[[0.78], [-0.67, 0.21]]``."""
    if isinstance(gamma, np.ndarray):
        g = np.asarray(gamma, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("Cholesky factor must be square")
        return np.tril(g)
    rows = [list(np.atleast_1d(r)) for r in gamma]
    k = len(rows)
    g = np.zeros((k, k))
    for i, r in enumerate(rows):
        if len(r) > k:
            raise ValueError("row longer than matrix order")
        g[i, : len(r)] = r
    return np.tril(g)


def sigma_from_cholesky(gamma) -> np.ndarray:
    """Standard deviations of the random coefficients: row norms of the factor."""
    g = _lower(gamma)
    return np.sqrt(np.sum(g * g, axis=1))


def covariance_from_cholesky(gamma) -> np.ndarray:
    g = _lower(gamma)
    return g @ g.T


def correlation_matrix(gamma) -> np.ndarray:
    g = _lower(gamma)
    sigma = sigma_from_cholesky(g)
    if np.any(sigma <= 0):
        raise ZeroSigma("a random coefficient has zero standard deviation")
    cor = (g @ g.T) / np.outer(sigma, sigma)
    np.fill_diagonal(cor, 1.0)
    return np.clip(cor, -1.0, 1.0)


def sigma_t_stat(sigma: float, sample_sd: float, n: int) -> float:
    """t ratio of a standard deviation with standard error ``S / sqrt(N)``."""
    if n <= 0 or sample_sd <= 0:
        raise ValueError("need N > 0 and S > 0")
    return float(sigma) / (float(sample_sd) / math.sqrt(n))


@dataclass(frozen=True)
class LRTest:
    statistic: float
    df: int
    p_value: float

    def significant(self, level: float = 0.01) -> bool:
        return self.p_value < level

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def lr_test(ll_restricted: float, ll_full: float, df_diff: int) -> LRTest:
    stat = -2.0 * (ll_restricted - ll_full)
    if stat < 0:
        warnings.warn(
            f"full model log-likelihood {ll_full} is below the restricted {ll_restricted}",
            NegativeStatistic,
            stacklevel=2,
        )
    p = float(chi2.sf(max(stat, 0.0), df_diff)) if df_diff > 0 else float("nan")
    return LRTest(stat, int(df_diff), p)


def mcfadden_r2(ll: float, ll0: float) -> float:
    if not ll0 < 0:
        raise ValueError("LL(0) must be negative")
    return 1.0 - ll / ll0


def aic(ll: float, df: int) -> float:
    return 2.0 * df - 2.0 * ll


def null_loglik(n: int, n_alternatives: int = 3) -> float:
    return -n * math.log(n_alternatives)


def fit_metrics(ll: float, ll0: float, df: int, n: int | None = None) -> tuple[float, float]:
    """McFadden R² and AIC. ``n`` is accepted for symmetry with reports and unused."""
    return mcfadden_r2(ll, ll0), aic(ll, df)


def stars(p_value: float, level: float = 0.01) -> str:
    return "*" if p_value < level else ""


def positive_share(mean: float, sigma: float) -> float:
    """Share of a normal coefficient distribution above zero."""
    if sigma <= 0:
        return float(mean > 0)
    return float(norm.sf(0.0, loc=mean, scale=sigma))
