"""Recenter/rescale combination of subset draws and divide-and-conquer baselines.

Every subset draw is mapped affinely,

    theta -> center + scale^{1/2} subset_cov^{-1/2} (theta - subset_center),

and the transformed draws of all subsets are pooled.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .hmm_core import packed_dim, param_names, unpack_params
from .sampler import DrawSet

CENTERS = ("full_mle", "mean_of_means", "subset")
SCALES = ("identity", "sqrt_average", "average")
TRANSFORMS = ("raw", "constrained")


class CombineError(ValueError):
    pass


def subset_moments(draws: Union[DrawSet, ArrayLike]) -> tuple[NDArray, NDArray]:
    """Sample mean and covariance with divisor T."""
    x = draws.draws if isinstance(draws, DrawSet) else np.atleast_2d(np.asarray(draws, dtype=float))
    T = x.shape[0]
    if T < 2:
        raise CombineError(f"need at least 2 draws for moments, got {T}")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / T
    return mean, 0.5 * (cov + cov.T)


def _check_symmetric(A: NDArray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise CombineError("matrix must be square")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(A), initial=0.0)):
        raise CombineError("matrix is not symmetric")


def matrix_sqrt(A: ArrayLike) -> NDArray:
    """Symmetric PSD square root via the eigendecomposition."""
    A = np.asarray(A, dtype=float)
    _check_symmetric(A)
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.any(w < -1e-10 * scale):
        raise CombineError(f"matrix has a negative eigenvalue {w.min():.3g}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def inverse_sqrt(A: ArrayLike, cutoff: float = 1e-10) -> NDArray:
    """Pseudo-inverse square root of a symmetric PSD matrix.

    Eigenvalues at or below ``cutoff * trace(A) / d`` are treated as exact
    null directions (simplex coordinates always have some) and mapped to 0.
    """
    A = np.asarray(A, dtype=float)
    _check_symmetric(A)
    d = A.shape[0]
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    keep = w > cutoff * max(np.trace(A), 0.0) / d
    if not np.any(keep):
        raise CombineError("covariance is zero: nothing to whiten")
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.sqrt(w[keep])
    return (V * inv) @ V.T


# ---------------------------------------------------------------------------
# coordinate transforms


def _alr(p: NDArray) -> NDArray:
    p = np.clip(p, 1e-300, None)
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def _alr_inv(z: NDArray) -> NDArray:
    z = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def to_unconstrained(draws: NDArray, S: int) -> NDArray:
    """log variances and additive log-ratios of Q rows and r."""
    mu, sigma2, Q, r = unpack_params(draws, S)
    parts = [mu, np.log(sigma2), _alr(Q).reshape(draws.shape[0], -1), _alr(r)]
    return np.concatenate(parts, axis=1)


def from_unconstrained(z: NDArray, S: int) -> NDArray:
    mu = z[:, :S]
    sigma2 = np.exp(z[:, S : 2 * S])
    q = z[:, 2 * S : 2 * S + S * (S - 1)].reshape(-1, S, S - 1)
    r = z[:, 2 * S + S * (S - 1) :]
    Q = _alr_inv(q).reshape(z.shape[0], S * S)
    return np.concatenate([mu, sigma2, Q, _alr_inv(r)], axis=1)


def project_to_support(draws: NDArray, S: int, var_floor: float = 1e-12) -> tuple[NDArray, NDArray]:
    """Clip simplex blocks at 0 and renormalize; floor variances.

    Returns the projected draws and a boolean mask of rows that changed.
    """
    out = draws.copy()
    mu, sigma2, Q, r = unpack_params(out, S)
    bad = np.any(sigma2 <= 0, axis=1) | np.any(Q < 0, axis=(1, 2)) | np.any(r < 0, axis=1)
    sigma2 = np.maximum(sigma2, var_floor)
    Q = np.clip(Q, 0.0, None)
    Q = Q / Q.sum(axis=2, keepdims=True)
    r = np.clip(r, 0.0, None)
    r = r / r.sum(axis=1, keepdims=True)
    out[:, S : 2 * S] = sigma2
    out[:, 2 * S : 2 * S + S * S] = Q.reshape(-1, S * S)
    out[:, 2 * S + S * S :] = r
    return out, bad


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CombineSpec:
    """Choice of global center, global scale and coordinate system.

    ``center``: ``"full_mle"`` (requires ``full_mle`` in :func:`combine`),
    ``"mean_of_means"``, ``"subset"`` (each subset keeps its own center),
    or an explicit vector; ``"subset_mle"`` is accepted as an alias of
    ``"subset"``. ``scale``: ``"identity"``, ``"sqrt_average"``
    (square of the average of per-subset covariance roots),
    ``"average"`` (average covariance), or an explicit SPD matrix.
    """

    center: Union[str, tuple] = "full_mle"
    scale: Union[str, tuple] = "average"
    transform: str = "raw"

    def __post_init__(self):
        if self.center == "subset_mle":
            object.__setattr__(self, "center", "subset")
        if isinstance(self.center, str) and self.center not in CENTERS:
            raise ValueError(f"center must be one of {CENTERS} or a vector")
        if isinstance(self.scale, str) and self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES} or a matrix")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")
        if not isinstance(self.scale, str):
            A = np.asarray(self.scale, dtype=float)
            _check_symmetric(A)
            if np.linalg.eigvalsh(A).min() <= 0:
                raise ValueError("explicit scale matrix must be positive definite")


@dataclass
class CombinedDraws:
    draws: NDArray
    provenance: NDArray  # (N, 2): subset index, draw index
    S: int
    center: Optional[NDArray] = None
    scale: Optional[NDArray] = None
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return param_names(self.S)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.names + ["subset_index", "draw_index"])
            for row, (j, t) in zip(self.draws, self.provenance):
                w.writerow([repr(float(v)) for v in row] + [int(j), int(t)])

    @classmethod
    def from_csv(cls, path) -> "CombinedDraws":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        S = sum(1 for h in header if h.startswith("mu"))
        d = packed_dim(S)
        draws = np.array([[float(v) for v in row[:d]] for row in body])
        prov = np.array([[int(row[d]), int(row[d + 1])] for row in body], dtype=np.int64)
        return cls(draws, prov.reshape(-1, 2), S)


def _stack(drawsets: Sequence[DrawSet]):
    if not drawsets:
        raise CombineError("no drawsets to combine")
    S = drawsets[0].S
    if any(ds.S != S for ds in drawsets):
        raise CombineError("drawsets disagree on the number of states")
    return S


def combine(
    drawsets: Sequence[DrawSet],
    spec: CombineSpec = CombineSpec(),
    full_mle: Optional[ArrayLike] = None,
    subset_centers: Optional[Sequence[ArrayLike]] = None,
    cutoff: float = 1e-10,
) -> CombinedDraws:
    """Pool recentered, rescaled subset draws.

    Subset j is centered at ``subset_centers[j]`` when given (e.g. per-subset
    MLEs) and at its draw average otherwise, and whitened by the
    pseudo-inverse root of its draw covariance (see :func:`inverse_sqrt`).
    """
    S = _stack(drawsets)
    constrained = spec.transform == "constrained"
    xs = [to_unconstrained(ds.draws, S) if constrained else ds.draws for ds in drawsets]
    K = len(xs)
    moments = [subset_moments(x) for x in xs]
    if subset_centers is not None:
        if len(subset_centers) != K:
            raise CombineError("need one subset center per drawset")
        centers = [np.asarray(c, dtype=float) for c in subset_centers]
        if constrained:
            centers = [to_unconstrained(c[None, :], S)[0] for c in centers]
    else:
        centers = [m for m, _ in moments]
    covs = [c for _, c in moments]
    d = xs[0].shape[1]

    if isinstance(spec.scale, str):
        if spec.scale == "identity":
            target = np.eye(d)
        elif spec.scale == "average":
            target = sum(covs) / K
        else:
            root = sum(matrix_sqrt(c) for c in covs) / K
            target = root @ root
    else:
        if constrained:
            raise CombineError("explicit scale matrices are only supported with transform='raw'")
        target = np.asarray(spec.scale, dtype=float)
    color = matrix_sqrt(target)

    if isinstance(spec.center, str):
        if spec.center == "full_mle":
            if full_mle is None:
                raise CombineError("center='full_mle' needs the full-data MLE")
            g = np.asarray(full_mle, dtype=float)
            gcenter = to_unconstrained(g[None, :], S)[0] if constrained else g
        elif spec.center == "mean_of_means":
            gcenter = np.mean([m for m, _ in moments], axis=0)
        else:
            gcenter = None
    else:
        gcenter = np.asarray(spec.center, dtype=float)
        if constrained:
            gcenter = to_unconstrained(gcenter[None, :], S)[0]

    out, prov = [], []
    for j, (x, c, cov) in enumerate(zip(xs, centers, covs)):
        try:
            white = inverse_sqrt(cov, cutoff)
        except CombineError as exc:
            raise CombineError(f"subset {j}: {exc}") from exc
        A = color @ white
        base = c if gcenter is None else gcenter
        out.append(base + (x - c) @ A.T)
        prov.append(np.column_stack([np.full(x.shape[0], drawsets[j].subset_index), np.arange(x.shape[0])]))
    pooled = np.vstack(out)
    if constrained:
        pooled = from_unconstrained(pooled, S)
    pooled, flagged = project_to_support(pooled, S)
    meta = {"projected_rows": int(flagged.sum()), "spec": repr(spec)}
    return CombinedDraws(pooled, np.vstack(prov), S, gcenter, target, meta)


def baseline_dpmc(drawsets: Sequence[DrawSet]) -> CombinedDraws:
    """Shift each subset to the mean of subset means, with no rescaling.

    This is the recentering combination with an identity map in whitened
    coordinates (target scale equal to each subset's own covariance).
    """
    S = _stack(drawsets)
    means = [subset_moments(ds)[0] for ds in drawsets]
    gcenter = np.mean(means, axis=0)
    out = [ds.draws - m + gcenter for ds, m in zip(drawsets, means)]
    prov = [np.column_stack([np.full(ds.T, ds.subset_index), np.arange(ds.T)]) for ds in drawsets]
    pooled, flagged = project_to_support(np.vstack(out), S)
    return CombinedDraws(pooled, np.vstack(prov), S, gcenter, None, {"projected_rows": int(flagged.sum())})


def _quantile_average(drawsets: Sequence[DrawSet], seed) -> NDArray:
    _stack(drawsets)
    if any(ds.T == 0 for ds in drawsets):
        raise CombineError("empty drawset")
    T = max(ds.T for ds in drawsets)
    rng = np.random.default_rng(seed)
    mats = []
    for ds in drawsets:
        x = ds.draws
        if ds.T < T:
            x = x[rng.integers(ds.T, size=T)]
        mats.append(np.sort(x, axis=0))
    return np.mean(mats, axis=0)


def baseline_pie(drawsets: Sequence[DrawSet], seed=0) -> NDArray:
    """Average of the subset marginal quantile functions, per coordinate.

    Returns T x d draws where row t holds the t-th averaged order statistic
    of every coordinate. Subsets with fewer draws are resampled with
    replacement up to the largest T.
    """
    return _quantile_average(drawsets, seed)


def baseline_wasp(drawsets: Sequence[DrawSet], seed=0) -> NDArray:
    """Per-coordinate 2-Wasserstein barycenter of the subset marginals.

    In one dimension the barycenter's quantile function is the average of
    the input quantile functions, so this coincides with :func:`baseline_pie`.
    """
    return _quantile_average(drawsets, seed)
