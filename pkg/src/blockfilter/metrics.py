"""Accuracy (1 - total variation via KDE), 1-Wasserstein and normal TV bounds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import wasserstein_distance

logger = logging.getLogger(__name__)

GRID_SIZE = 2048
_CHUNK = 512


def silverman_bandwidth(x: NDArray) -> float:
    """0.9 min(sd, IQR/1.34) T^(-1/5); falls back to sd when the IQR is 0."""
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(x: NDArray, grid: NDArray, bw: float) -> NDArray:
    """Gaussian kernel density of sample ``x`` evaluated on ``grid``."""
    dens = np.zeros_like(grid)
    for i in range(0, x.size, _CHUNK):
        z = (grid[:, None] - x[None, i : i + _CHUNK]) / bw
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    return dens / (x.size * bw * np.sqrt(2.0 * np.pi))


def accuracy_1d(approx: ArrayLike, ref: ArrayLike, grid_size: int = GRID_SIZE) -> float:
    """1 - TV between Gaussian KDEs of two samples, clipped to [0, 1]."""
    a = np.asarray(approx, dtype=float).ravel()
    b = np.asarray(ref, dtype=float).ravel()
    if a.size < 30 or b.size < 30:
        raise ValueError("accuracy needs at least 30 draws per sample")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("degenerate sample: zero variance")
    ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    pad = 3.0 * max(ha, hb)
    lo = min(a.min(), b.min()) - pad
    hi = max(a.max(), b.max()) + pad
    grid = np.linspace(lo, hi, grid_size)
    diff = np.abs(kde(a, grid, ha) - kde(b, grid, hb))
    tv = 0.5 * np.trapezoid(diff, grid)
    return float(np.clip(1.0 - tv, 0.0, 1.0))


@dataclass
class AccuracyReport:
    per_dimension: list[float]
    dimension_names: list[str]

    @property
    def median(self) -> float:
        return float(np.median(self.per_dimension))

    def __getitem__(self, name: str) -> float:
        return self.per_dimension[self.dimension_names.index(name)]

    def rows(self) -> list[tuple[str, float]]:
        return list(zip(self.dimension_names, self.per_dimension)) + [("median", self.median)]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("dimension,accuracy\n")
            for name, v in self.rows():
                fh.write(f"{name},{v!r}\n")

    def to_json(self) -> str:
        return json.dumps([{"dimension": n, "accuracy": v} for n, v in self.rows()])


def accuracy_report(
    approx: ArrayLike,
    ref: ArrayLike,
    names: Sequence[str],
    ref_names: Sequence[str] | None = None,
    grid_size: int = GRID_SIZE,
) -> AccuracyReport:
    """Column-wise :func:`accuracy_1d`; columns of ``ref`` are matched by name."""
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    names = list(names)
    ref_names = names if ref_names is None else list(ref_names)
    if approx.shape[1] != len(names) or ref.shape[1] != len(ref_names):
        raise ValueError("column count does not match the names given")
    missing = [n for n in names if n not in ref_names]
    if missing:
        raise ValueError(f"reference has no columns named {missing}")
    vals = [accuracy_1d(approx[:, i], ref[:, ref_names.index(n)], grid_size) for i, n in enumerate(names)]
    return AccuracyReport(vals, names)


def w1_1d(a: ArrayLike, b: ArrayLike) -> float:
    """Empirical 1-Wasserstein distance between two samples.

    Equal sizes use the sorted coupling directly; unequal sizes integrate
    the difference of the empirical quantile functions.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


class TVBound(NamedTuple):
    lower: float
    upper: float


def _check_spd(V: NDArray, name: str) -> None:
    if V.ndim != 2 or V.shape[0] != V.shape[1] or not np.allclose(V, V.T, atol=1e-10):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(V).min() <= 0:
        raise ValueError(f"{name} is not positive definite")


def normal_tv_statistic(mu1, V1, mu2, V2) -> tuple[float, bool]:
    """The three-term max controlling TV(N(mu1, V1), N(mu2, V2)) up to constants.

    Returns ``(tv, equal_means)``. For equal means only the covariance term
    is used, with the full identity basis.
    """
    mu1, mu2 = np.asarray(mu1, dtype=float), np.asarray(mu2, dtype=float)
    V1, V2 = np.asarray(V1, dtype=float), np.asarray(V2, dtype=float)
    d = mu1.shape[0]
    if d < 2:
        raise ValueError("the bound needs dimension d > 1")
    _check_spd(V1, "V1")
    _check_spd(V2, "V2")
    v = mu1 - mu2
    if not np.any(v):
        M = np.linalg.solve(V1, V2) - np.eye(d)
        return float(np.linalg.norm(M, "fro")), True
    vV1v = float(v @ V1 @ v)
    t1 = abs(float(v @ (V1 - V2) @ v)) / vV1v
    t2 = float(v @ v) / np.sqrt(vV1v)
    # orthonormal basis of the complement of v: trailing left singular vectors
    U, _, _ = np.linalg.svd(v.reshape(-1, 1), full_matrices=True)
    N = U[:, 1:]
    M = np.linalg.solve(N.T @ V1 @ N, N.T @ V2 @ N) - np.eye(d - 1)
    t3 = float(np.linalg.norm(M, "fro"))
    return max(t1, t2, t3), False


def normal_tv_bound(mu1, V1, mu2, V2) -> TVBound:
    """Lower and upper bounds ``(tv/200, 9 tv/2)`` on the TV distance of two normals."""
    tv, equal = normal_tv_statistic(mu1, V1, mu2, V2)
    if equal:
        logger.debug("equal means: using covariance term only (tv=%g)", tv)
    return TVBound(tv / 200.0, 4.5 * tv)
