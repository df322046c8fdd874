"""Baum-Welch maximum likelihood for Gaussian-emission HMMs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .hmm_core import FilterError, HmmModel, LOG_2PI, stationary_distribution

logger = logging.getLogger(__name__)


class DegenerateFitError(RuntimeError):
    def __init__(self, state: int, weight: float):
        self.state = state
        super().__init__(f"state {state} collapsed: effective count {weight:.3g} < 2")


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-8
    n_restarts: int = 1
    seed: int = 0
    var_floor: float = 1e-8  # relative to var(y)

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


def initial_guess(y: NDArray, S: int, rng=None):
    """Quantile split of the sorted data; restarts jitter the means."""
    groups = np.array_split(np.sort(y), S)
    mu = np.array([g.mean() for g in groups])
    sigma2 = np.array([g.var() if g.size > 1 else 0.0 for g in groups])
    sigma2 = np.where(sigma2 > 0, sigma2, max(np.var(y), 1e-12) / S**2)
    if rng is not None:
        mu = mu + rng.normal(scale=np.sqrt(sigma2))
    off = min(0.1, 0.5 / (S - 1)) if S > 1 else 0.0
    Q = np.full((S, S), off)
    np.fill_diagonal(Q, 1.0 - off * (S - 1))
    r = np.full(S, 1.0 / S)
    return Q, r, mu, sigma2


def _fit_once(y, S, Q, r, mu, sigma2, cfg: EmConfig):
    floor = cfg.var_floor * float(np.var(y))
    trace = []
    for _ in range(cfg.max_iter):
        log_b = -0.5 * (LOG_2PI + np.log(sigma2) + (y[:, None] - mu) ** 2 / sigma2)
        gamma, xi_sum, ll, bad = _kernels.posterior_marginals(log_b, Q, r)
        if bad >= 0:
            raise FilterError(bad)
        trace.append(float(ll))
        if len(trace) > 1 and (trace[-1] - trace[-2]) < cfg.tol * abs(trace[-2]):
            break
        w = gamma.sum(axis=0)
        if np.any(w < 2.0):
            a = int(np.argmin(w))
            raise DegenerateFitError(a, float(w[a]))
        r = gamma[0] / gamma[0].sum()
        Q = xi_sum / xi_sum.sum(axis=1, keepdims=True)
        mu = gamma.T @ y / w
        sigma2 = np.maximum((gamma * (y[:, None] - mu) ** 2).sum(axis=0) / w, floor)
    return (Q, r, mu, sigma2), trace


def baum_welch(y: ArrayLike, S: int, config: EmConfig = EmConfig()) -> tuple[HmmModel, list[float]]:
    """Fit an S-state Gaussian HMM by EM, keeping the best of ``n_restarts``.

    The first restart starts from a quantile split; later ones jitter the
    means. Returns the fitted model, with states ordered by mean and ``r``
    replaced by the stationary law of the fitted ``Q``, and the
    log-likelihood trace of the winning restart.
    """
    y = np.asarray(y, dtype=float)
    if S < 1 or y.size < S:
        raise ValueError(f"need S >= 1 and at least S observations (S={S}, n={y.size})")
    rng = np.random.default_rng(config.seed)
    best = None
    last_exc = None
    for k in range(config.n_restarts):
        start = initial_guess(y, S, rng if k > 0 else None)
        try:
            params, trace = _fit_once(y, S, *start, config)
        except (DegenerateFitError, FilterError) as exc:
            logger.info("restart %d failed: %s", k, exc)
            last_exc = exc
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace)
    if best is None:
        raise last_exc
    (Q, r, mu, sigma2), trace = best
    if S > 1:
        Q = np.clip(Q, 1e-300, None)
        Q = Q / Q.sum(axis=1, keepdims=True)
        r = stationary_distribution(Q)
    else:
        Q, r = np.ones((1, 1)), np.ones(1)
    model = HmmModel(Q=Q, r=r, mu=mu, sigma2=sigma2).sorted_by_mean()
    return model, trace
