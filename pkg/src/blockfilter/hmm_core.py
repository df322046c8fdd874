"""Gaussian-emission HMM kernels: simulation, filtering, likelihoods, mixing.

States are 0-based throughout (``0..S-1``).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Invalid HMM parameters."""


class FilterError(FloatingPointError):
    """A recursion produced all-zero weights at some time index."""

    def __init__(self, t: int, what: str = "emission likelihood"):
        self.t = int(t)
        super().__init__(f"all-zero {what} at time index {self.t}")


class ErgodicityError(ValueError):
    pass


def _simplex_check(p: NDArray, name: str, tol: float = 1e-12) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ModelError(f"{name} has negative or non-finite entries")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ModelError(f"{name} does not sum to 1 (sums: {s})")


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Parameters of an S-state HMM with Normal emissions."""

    Q: NDArray
    r: NDArray
    mu: NDArray
    sigma2: NDArray
    tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float, ndmin=2)
        r = np.array(self.r, dtype=float, ndmin=1)
        mu = np.array(self.mu, dtype=float, ndmin=1)
        sigma2 = np.array(self.sigma2, dtype=float, ndmin=1)
        S = mu.shape[0]
        if S < 1:
            raise ModelError("need at least one state")
        if Q.shape != (S, S) or r.shape != (S,) or sigma2.shape != (S,):
            raise ModelError(
                f"shape mismatch: Q{Q.shape}, r{r.shape}, mu{mu.shape}, sigma2{sigma2.shape}"
            )
        _simplex_check(Q, "transition matrix Q", self.tol)
        _simplex_check(r, "initial distribution r", self.tol)
        if not np.all(np.isfinite(mu)):
            raise ModelError("emission means must be finite")
        if not np.all(sigma2 > 0) or not np.all(np.isfinite(sigma2)):
            raise ModelError("emission variances must be positive and finite")
        for name, arr in (("Q", Q), ("r", r), ("mu", mu), ("sigma2", sigma2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def S(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def stationary(cls, Q, mu, sigma2) -> "HmmModel":
        """Model whose initial distribution is the stationary law of ``Q``."""
        Q = np.asarray(Q, dtype=float)
        return cls(Q=Q, r=stationary_distribution(Q), mu=mu, sigma2=sigma2)

    def log_emission(self, y: ArrayLike) -> NDArray:
        """log phi(y_t; mu_a, sigma2_a) as an (n, S) array."""
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return -0.5 * (LOG_2PI + np.log(self.sigma2) + (y - self.mu) ** 2 / self.sigma2)

    def with_initial(self, r: ArrayLike) -> "HmmModel":
        return HmmModel(Q=self.Q, r=np.asarray(r, dtype=float), mu=self.mu, sigma2=self.sigma2)

    def permuted(self, perm: ArrayLike) -> "HmmModel":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return HmmModel(
            Q=self.Q[np.ix_(perm, perm)],
            r=self.r[perm],
            mu=self.mu[perm],
            sigma2=self.sigma2[perm],
        )

    def sorted_by_mean(self) -> "HmmModel":
        return self.permuted(np.argsort(self.mu, kind="stable"))

    def pack(self) -> NDArray:
        return pack_params(self.mu, self.sigma2, self.Q, self.r)

    @classmethod
    def unpack(cls, theta: ArrayLike, S: int, tol: float = 1e-10) -> "HmmModel":
        mu, sigma2, Q, r = unpack_params(theta, S)
        return cls(Q=Q, r=r, mu=mu, sigma2=sigma2, tol=tol)

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "Q": self.Q.tolist(),
            "r": self.r.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        return cls(Q=d["Q"], r=d["r"], mu=d["mu"], sigma2=d["sigma2"])


def packed_dim(S: int) -> int:
    return 2 * S + S * S + S


def pack_params(mu, sigma2, Q, r) -> NDArray:
    """Packing order: mu_1..mu_S, sigma2_1..sigma2_S, Q row-major, r."""
    return np.concatenate([np.ravel(mu), np.ravel(sigma2), np.ravel(Q), np.ravel(r)]).astype(float)


def unpack_params(theta: ArrayLike, S: int):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != packed_dim(S):
        raise ValueError(f"expected {packed_dim(S)} packed coordinates for S={S}, got {theta.shape[-1]}")
    mu = theta[..., :S]
    sigma2 = theta[..., S : 2 * S]
    Q = theta[..., 2 * S : 2 * S + S * S].reshape(theta.shape[:-1] + (S, S))
    r = theta[..., 2 * S + S * S :]
    return mu, sigma2, Q, r


def param_names(S: int) -> list[str]:
    names = [f"mu{a + 1}" for a in range(S)]
    names += [f"sigma2_{a + 1}" for a in range(S)]
    names += [f"Q_{a + 1}_{b + 1}" for a in range(S) for b in range(S)]
    names += [f"r_{a + 1}" for a in range(S)]
    return names


def benchmark_model() -> HmmModel:
    """Three-state benchmark: means (-2, 0, 2), sd 0.5, stationary r = (0.2, 0.6, 0.2)."""
    Q = np.array([[0.6, 0.3, 0.1], [0.1, 0.8, 0.1], [0.1, 0.3, 0.6]])
    return HmmModel.stationary(Q, mu=[-2.0, 0.0, 2.0], sigma2=[0.25, 0.25, 0.25])


def simulate(model: HmmModel, n: int, seed=None) -> tuple[NDArray, NDArray]:
    """Draw a hidden path and observations of length ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    S = model.S
    u = rng.random(n)
    cum_r = np.cumsum(model.r)
    cum_Q = np.cumsum(model.Q, axis=1)
    x = np.empty(n, dtype=np.int64)
    x[0] = min(np.searchsorted(cum_r, u[0] * cum_r[-1], side="right"), S - 1)
    for t in range(1, n):
        row = cum_Q[x[t - 1]]
        x[t] = min(np.searchsorted(row, u[t] * row[-1], side="right"), S - 1)
    z = rng.standard_normal(n)
    y = model.mu[x] + np.sqrt(model.sigma2[x]) * z
    return x, y


def stationary_distribution(Q: ArrayLike) -> NDArray:
    """Stationary vector r with r^T Q = r^T.

    Ergodicity is checked by requiring every entry of Q^S to be positive.
    """
    Q = np.asarray(Q, dtype=float)
    S = Q.shape[0]
    if Q.shape != (S, S):
        raise ValueError("Q must be square")
    _simplex_check(Q, "transition matrix Q", 1e-10)
    if not np.all(np.linalg.matrix_power(Q, S) > 0):
        raise ErgodicityError(
            f"Q is not ergodic: Q^{S} has non-positive entries (all entries of Q^S must be > 0)"
        )
    # solve r^T (Q - I) = 0 with sum(r) = 1 as an overdetermined least-squares system
    A = np.vstack([(Q - np.eye(S)).T, np.ones(S)])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    r, *_ = np.linalg.lstsq(A, b, rcond=None)
    # polish with a couple of power steps, then renormalize
    for _ in range(3):
        r = r @ Q
    r = np.clip(r, 0.0, None)
    return r / r.sum()


class FilterState(NamedTuple):
    probs: NDArray
    log_evidence: float


@dataclass(frozen=True)
class FilterResult:
    """Output of :func:`forward_filter`.

    ``predicted[t]`` is the prediction filter for time t (``predicted[0]`` is
    the initial distribution); ``predicted[n]`` is the one-step-ahead
    prediction after the block. ``cumulative[t]`` is the log-likelihood of
    observations ``0..t``.
    """

    predicted: NDArray
    filtered: NDArray
    cumulative: NDArray
    loglik: float

    def __len__(self) -> int:
        return self.filtered.shape[0]

    def __getitem__(self, t: int) -> FilterState:
        prev = self.cumulative[t - 1] if t > 0 else 0.0
        return FilterState(self.predicted[t], float(prev))

    @property
    def next_prediction(self) -> NDArray:
        return self.predicted[-1]


def forward_filter(model: HmmModel, y: ArrayLike, initial: Optional[ArrayLike] = None) -> FilterResult:
    """Normalized forward recursion starting from ``initial`` (default ``model.r``)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("observation block must be a non-empty 1-D sequence")
    init = model.r if initial is None else np.asarray(initial, dtype=float)
    _simplex_check(init, "initial distribution", 1e-10)
    pred, filt, cum, ll, bad = _kernels.forward_pass(model.log_emission(y), model.Q, init)
    if bad >= 0:
        raise FilterError(bad)
    return FilterResult(pred, filt, cum, float(ll))


def loglik(model: HmmModel, y: ArrayLike, initial: Optional[ArrayLike] = None) -> float:
    return forward_filter(model, y, initial).loglik


def one_block_conditional_loglik(model: HmmModel, block: ArrayLike, prev_block: ArrayLike = ()) -> float:
    """log p(block | prev_block), conditioning on the preceding block only.

    With an empty ``prev_block`` this is the stationary-start log-likelihood
    of ``block``.
    """
    prev = np.asarray(prev_block, dtype=float)
    if prev.size == 0:
        return forward_filter(model, block, model.r).loglik
    init = forward_filter(model, prev, model.r).next_prediction
    return forward_filter(model, block, init).loglik


@dataclass(frozen=True)
class MixingInputs:
    S: int
    epsilon: float
    M: float

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not self.M >= 1.0:
            raise ValueError(f"M must be >= 1, got {self.M}")

    @classmethod
    def from_model(cls, model: HmmModel, y: Optional[ArrayLike] = None, M: Optional[float] = None) -> "MixingInputs":
        eps = float(model.Q.min())
        if M is None:
            M = 1.0 if y is None else emission_ratio_bound(model, y)
        return cls(S=model.S, epsilon=eps, M=float(M))


def emission_ratio_bound(model: HmmModel, y: ArrayLike, clip: float = 1e6) -> float:
    """Empirical max over y of max_{a,b} g(y|a)/g(y|b), clipped at ``clip``."""
    lb = model.log_emission(y)
    log_ratio = float(np.max(lb.max(axis=1) - lb.min(axis=1)))
    return float(min(math.exp(min(log_ratio, 700.0)), clip))


def mixing_coefficient(inputs: MixingInputs) -> float:
    """rho = exp(-2 / (1 + (S-1) eps^-2 M))."""
    if inputs.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    denom = 1.0 + (inputs.S - 1) * inputs.M / inputs.epsilon**2
    return math.exp(-2.0 / denom)


class SubsetAdvice(NamedTuple):
    K: int
    m: int
    warning: Optional[str]


K_POLICIES = ("log_n", "n_quarter", "n_third")


def choose_k(n: int, policy: str) -> int:
    if policy == "log_n":
        v = math.log(n)
    elif policy == "n_quarter":
        v = n ** 0.25
    elif policy == "n_third":
        v = n ** (1.0 / 3.0)
    else:
        raise ValueError(f"unknown K policy {policy!r}; expected one of {K_POLICIES}")
    # absorb float error in roots of exact powers (1e6 ** (1/3) = 99.99999999999997)
    return max(1, math.ceil(round(v, 9)))


def max_subsets_advisory(n: int, rho: float, policy: str) -> SubsetAdvice:
    """Pick K by policy and warn when K >= rho^(-m)."""
    K = min(choose_k(n, policy), n)
    m = math.ceil(n / K)
    warning = None
    if 0.0 < rho < 1.0 and math.log(K) >= -m * math.log(rho):
        warning = (
            f"K={K} >= rho^-m = {math.exp(-m * math.log(rho)):.6g} (rho={rho:.6g}, m={m}): "
            "blocks are too short for the prediction filter to forget its start"
        )
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    return SubsetAdvice(K, m, warning)
