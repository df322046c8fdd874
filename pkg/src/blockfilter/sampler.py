"""Conjugate Gibbs sampling of block quasi-posteriors.

The subset likelihood is raised to the power ``K_power`` (the number of
blocks the series was split into), which multiplies every sufficient
statistic in the conjugate updates by ``K_power`` and raises the hidden-state
sampling weights to the same power. With ``K_power=1`` and the whole series
as one block this is the ordinary data-augmentation sampler.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from . import _kernels
from .hmm_core import (
    FilterError,
    HmmModel,
    LOG_2PI,
    forward_filter,
    pack_params,
    packed_dim,
    param_names,
    unpack_params,
)

logger = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Dirichlet / Normal / Gamma hyperparameters.

    Means get N(normal_mean, 1/normal_prec); precisions get
    Gamma(gamma_shape, gamma_rate) in the shape-rate parametrization; the
    initial distribution and every transition row get a Dirichlet with
    concentration ``dirichlet_conc`` (scalar or length-S vector).
    """

    normal_mean: float = 0.0
    normal_prec: float = 1.0
    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    dirichlet_conc: float | tuple = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.dirichlet_conc) <= 0):
            raise ValueError("Dirichlet concentrations must be positive")
        if self.normal_prec <= 0 or self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValueError("normal_prec, gamma_shape and gamma_rate must be positive")

    @classmethod
    def from_data(cls, y: ArrayLike, **kw) -> "PriorSpec":
        """Data-scaled prior: mean at the midrange, prior sd equal to the range."""
        y = np.asarray(y, dtype=float)
        lo, hi = float(y.min()), float(y.max())
        span = hi - lo if hi > lo else 1.0
        return cls(normal_mean=0.5 * (lo + hi), normal_prec=1.0 / span**2, **kw)

    def conc(self, S: int) -> NDArray:
        return np.broadcast_to(np.asarray(self.dirichlet_conc, dtype=float), (S,))


@dataclass(frozen=True)
class SamplerConfig:
    """Gibbs run settings.

    ``anneal`` is the fraction of burn-in used to warm the chain up: the
    power on the likelihood stays at 1 for the first half of that window and
    then ramps linearly to ``K_power``. 0 disables the warm-up. Kept draws
    always use the full power.
    """

    K_power: int = 1
    iters: int = 10_000
    burn_in: int = 5_000
    thin: int = 5
    seed: int = 0
    context_iters: Optional[int] = None
    anneal: float = 0.5

    def __post_init__(self):
        if self.K_power < 1:
            raise ValueError("K_power must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not (0 <= self.burn_in < self.iters):
            raise ValueError("need 0 <= burn_in < iters")
        if self.context_iters is not None and self.context_iters < 2:
            raise ValueError("context_iters must be >= 2")
        if not (0.0 <= self.anneal <= 1.0):
            raise ValueError("anneal must lie in [0, 1]")

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.iters, self.thin))

    def for_context(self) -> "SamplerConfig":
        if self.context_iters is None:
            return self
        burn = self.burn_in * self.context_iters // self.iters
        return SamplerConfig(self.K_power, self.context_iters, burn, self.thin, self.seed, None, self.anneal)

    def power_at(self, it: int) -> float:
        """Power used at iteration ``it``: 1 for the first half of the annealing
        window, then a linear ramp reaching ``K_power`` at its end."""
        window = self.anneal * self.burn_in
        if self.K_power == 1 or it >= window:
            return float(self.K_power)
        hold = 0.5 * window
        if it < hold:
            return 1.0
        return 1.0 + (self.K_power - 1) * (it - hold) / (window - hold)


@dataclass
class DrawSet:
    """T x d parameter draws in packed order plus provenance."""

    draws: NDArray
    S: int
    subset_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[1] != packed_dim(self.S):
            raise ValueError(f"draws have {self.draws.shape[1]} columns, expected {packed_dim(self.S)}")

    @property
    def T(self) -> int:
        return self.draws.shape[0]

    @property
    def names(self) -> list[str]:
        return param_names(self.S)

    def column(self, name: str) -> NDArray:
        return self.draws[:, self.names.index(name)]

    def check(self, tol: float = 1e-10) -> None:
        mu, sigma2, Q, r = unpack_params(self.draws, self.S)
        if np.any(sigma2 <= 0):
            raise ValueError("non-positive variance draw")
        for arr, nm in ((Q, "Q"), (r, "r")):
            if np.any(arr < -tol) or np.any(np.abs(arr.sum(-1) - 1) > tol):
                raise ValueError(f"{nm} draw off the simplex")

    def to_csv(self, path) -> None:
        seed = self.meta.get("seed", "")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.names + ["subset_index", "seed"])
            for row in self.draws:
                w.writerow([repr(float(v)) for v in row] + [self.subset_index, seed])

    @classmethod
    def from_csv(cls, path) -> "DrawSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        S = sum(1 for h in header if h.startswith("mu"))
        d = packed_dim(S)
        if header[:d] != param_names(S):
            raise ValueError(f"{path}: unexpected header")
        draws = np.array([[float(v) for v in row[:d]] for row in body])
        meta = {}
        j = 0
        if "subset_index" in header and body:
            j = int(body[0][header.index("subset_index")])
        if "seed" in header and body and body[0][header.index("seed")] != "":
            meta["seed"] = int(body[0][header.index("seed")])
        return cls(draws, S, j, meta)


# ---------------------------------------------------------------------------
# full conditionals


def draw_initial_dist(x1: Optional[int], S: int, K_power: int, prior: PriorSpec, rng) -> NDArray:
    """r | x1 ~ Dir(K 1{x1=a} + conc_a). ``x1=None`` (or K_power=0) gives the prior."""
    alpha = prior.conc(S).copy()
    if x1 is not None:
        alpha[x1] += K_power
    return rng.dirichlet(alpha)


def draw_transition_rows(counts: ArrayLike, K_power: int, prior: PriorSpec, rng) -> NDArray:
    """Row a ~ Dir(K n_a1 + conc, ..., K n_aS + conc), independently."""
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("transition counts must be non-negative")
    S = counts.shape[0]
    alpha = K_power * counts + prior.conc(S)
    Q = np.empty((S, S))
    for a in range(S):
        Q[a] = rng.dirichlet(alpha[a])
    return Q


def mean_conditional(sums, counts, sigma2, K_power, prior: PriorSpec):
    """(mean, variance) of mu_a | ... ."""
    sums, counts, sigma2 = (np.asarray(v, dtype=float) for v in (sums, counts, sigma2))
    kap = prior.normal_prec
    denom = K_power * counts + kap * sigma2
    mean = (K_power * sums + kap * prior.normal_mean * sigma2) / denom
    return mean, sigma2 / denom


def draw_means(sums, counts, sigma2, K_power: int, prior: PriorSpec, rng) -> NDArray:
    mean, var = mean_conditional(sums, counts, sigma2, K_power, prior)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])


def precision_conditional(counts, sq_resid, K_power, prior: PriorSpec):
    """(shape, rate) of sigma^-2_a | ... ."""
    counts, sq_resid = np.asarray(counts, dtype=float), np.asarray(sq_resid, dtype=float)
    if np.any(sq_resid < 0):
        raise ValueError("sums of squared residuals must be non-negative")
    return prior.gamma_shape + 0.5 * K_power * counts, prior.gamma_rate + 0.5 * K_power * sq_resid


def draw_variances(counts, sq_resid, K_power: int, prior: PriorSpec, rng) -> NDArray:
    """Draw sigma^-2_a from its Gamma conditional and return sigma2_a."""
    shape, rate = precision_conditional(counts, sq_resid, K_power, prior)
    prec = rng.gamma(shape, 1.0 / rate)
    return 1.0 / prec


def _states_from(log_b, Q, init, K_power, rng) -> NDArray:
    u = rng.random(log_b.shape[0])
    x, bad = _kernels.sample_path(log_b, Q, np.asarray(init, dtype=float), float(K_power), u)
    if bad >= 0:
        raise FilterError(bad, "hidden-state weights")
    return x


def draw_hidden_chain(model: HmmModel, block: ArrayLike, init_dist: ArrayLike, K_power: int, rng) -> NDArray:
    """Sample a hidden path with every forward-sampling weight raised to ``K_power``.

    Backward messages come from one unpowered backward pass. ``K_power=1``
    is exact forward-filtering backward-sampling.
    """
    block = np.asarray(block, dtype=float)
    if block.size == 0:
        raise ValueError("empty block")
    return _states_from(model.log_emission(block), model.Q, init_dist, K_power, rng)


def prediction_filter_weights(model: HmmModel, prev_block: ArrayLike, K_power: int) -> NDArray:
    """w_b proportional to sum_a {q_ab P(prev_block, X_last = a)}^K, normalized.

    The forward pass over ``prev_block`` starts from ``model.r``.
    """
    prev_block = np.asarray(prev_block, dtype=float)
    if prev_block.size == 0:
        raise ValueError("prev_block must be non-empty")
    res = forward_filter(model, prev_block, model.r)
    # P(block, X_last=a) = exp(loglik) * filtered[a]; the common factor cancels
    with np.errstate(divide="ignore"):
        log_f = np.log(res.filtered[-1])
        log_q = np.log(model.Q)
    logw = logsumexp(K_power * (log_q + log_f[:, None]), axis=0)
    return np.exp(logw - logsumexp(logw))


# ---------------------------------------------------------------------------
# Gibbs driver


def transition_counts(x: NDArray, S: int) -> NDArray:
    return np.bincount(x[:-1] * S + x[1:], minlength=S * S).reshape(S, S)


def _log_b(y, mu, sigma2):
    return -0.5 * (LOG_2PI + np.log(sigma2) + (y[:, None] - mu) ** 2 / sigma2)


def _relabel(mu, sigma2, Q, r):
    p = np.argsort(mu, kind="stable")
    return pack_params(mu[p], sigma2[p], Q[np.ix_(p, p)], r[p])


def _gibbs(y, S, prior, cfg: SamplerConfig, rng, fixed_r=None, x_init=None) -> NDArray:
    n = y.shape[0]
    x = rng.integers(S, size=n) if x_init is None else np.array(x_init, dtype=np.int64)
    v = float(np.var(y))
    sigma2 = np.full(S, v if v > 0 else 1.0)
    r = np.full(S, 1.0 / S) if fixed_r is None else np.asarray(fixed_r, dtype=float)
    burn_in, thin = cfg.burn_in, cfg.thin
    out = np.empty((cfg.n_kept, packed_dim(S)))
    k = 0
    for it in range(cfg.iters):
        K = cfg.power_at(it)
        try:
            if fixed_r is None:
                r = draw_initial_dist(int(x[0]), S, K, prior, rng)
            Q = draw_transition_rows(transition_counts(x, S), K, prior, rng)
            counts = np.bincount(x, minlength=S)
            sums = np.bincount(x, weights=y, minlength=S)
            mu = draw_means(sums, counts, sigma2, K, prior, rng)
            ss = np.bincount(x, weights=(y - mu[x]) ** 2, minlength=S)
            sigma2 = draw_variances(counts, ss, K, prior, rng)
            x = _states_from(_log_b(y, mu, sigma2), Q, r, K, rng)
        except (FloatingPointError, ValueError) as exc:
            raise SamplerError(f"Gibbs iteration {it}: {exc}") from exc
        if it >= burn_in and (it - burn_in) % thin == 0:
            out[k] = _relabel(mu, sigma2, Q, r)
            k += 1
    return out


def posterior_mean_model(draws: NDArray, S: int) -> HmmModel:
    mu, sigma2, Q, r = unpack_params(draws.mean(axis=0), S)
    Q = np.clip(Q, 1e-300, None)
    r = np.clip(r, 1e-300, None)
    return HmmModel(Q=Q / Q.sum(1, keepdims=True), r=r / r.sum(), mu=mu, sigma2=sigma2)


def run_subset_sampler(
    context: ArrayLike,
    block: ArrayLike,
    S: int,
    prior: PriorSpec,
    config: SamplerConfig,
    subset_index: int = 0,
) -> DrawSet:
    """Sample the quasi-posterior of one block.

    With an empty ``context`` the initial distribution is sampled along with
    everything else. Otherwise the sampler is first run on the context block;
    the posterior-mean parameters of that run give the prediction filter into
    ``block``, which is then held fixed as the initial distribution while the
    remaining parameters are sampled on ``block``.

    The generator is seeded from ``(config.seed, subset_index)``.
    """
    block = np.asarray(block, dtype=float)
    context = np.asarray(context, dtype=float)
    if block.ndim != 1 or block.size == 0:
        raise ValueError("block must be a non-empty 1-D series")
    rng = np.random.default_rng([config.seed, subset_index])
    K = config.K_power
    meta = {"seed": config.seed, "subset_index": subset_index, "config": asdict(config)}

    if context.size == 0:
        draws = _gibbs(block, S, prior, config, rng)
    else:
        ctx = config.for_context()
        ctx_draws = _gibbs(context, S, prior, ctx, rng)
        theta_bar = posterior_mean_model(ctx_draws, S)
        w = prediction_filter_weights(theta_bar, context, K)
        meta["prediction_filter"] = w.tolist()
        x0 = np.minimum(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"), S - 1)
        x_init = rng.integers(S, size=block.size)
        x_init[0] = x0
        draws = _gibbs(block, S, prior, config, rng, fixed_r=w, x_init=x_init)
    logger.debug("subset %d: kept %d draws", subset_index, draws.shape[0])
    return DrawSet(draws, S, subset_index, meta)
