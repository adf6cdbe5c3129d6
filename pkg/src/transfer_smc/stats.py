"""Numeric primitives shared by the samplers.

Weight algebra, stratified resampling, effective sample size, weighted
moments, multivariate normal proposals and highest-density regions.
Every stochastic function takes an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TsmcError",
    "DegenerateWeightsError",
    "CovarianceDegenerateError",
    "InsufficientSamplesError",
    "ContractViolation",
    "ParticleSystem",
    "make_rng",
    "child_rngs",
    "log_sum_exp",
    "normalize_log_weights",
    "ess",
    "ess_from_log_weights",
    "stratified_resample",
    "weighted_mean_cov",
    "jittered_cholesky",
    "mvn_sample",
    "hpd_region",
    "in_region",
]

JITTER_SCALE = 1e-8
JITTER_DOUBLINGS = 6
WEIGHT_SUM_TOL = 1e-8


class TsmcError(Exception):
    """Base class for sampler failures."""


class DegenerateWeightsError(TsmcError):
    pass


class CovarianceDegenerateError(TsmcError):
    pass


class InsufficientSamplesError(TsmcError):
    pass


class ContractViolation(TsmcError, ValueError):
    """An input broke a documented precondition."""


# --------------------------------------------------------------------------
# random streams


def make_rng(seed, *key: int) -> np.random.Generator:
    """Philox-backed generator for ``seed`` and an optional integer spawn key.

    Streams with different keys are statistically independent, so
    replicate ``(seed, r, k)`` can be rebuilt in any process without
    replaying the ones before it.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child_rngs(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``count`` independent generators."""
    return list(rng.spawn(count))


# --------------------------------------------------------------------------
# weights


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))``.

    Raises DegenerateWeightsError when every entry is ``-inf``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ContractViolation("log_sum_exp of an empty sequence")
    if np.any(np.isnan(v)):
        raise DegenerateWeightsError("NaN in log-weights")
    m = np.max(v)
    if m == -np.inf:
        raise DegenerateWeightsError("all log-weights are -inf")
    if m == np.inf:
        raise DegenerateWeightsError("infinite log-weight")
    return float(m + np.log(np.sum(np.exp(v - m))))


def normalize_log_weights(log_weights) -> np.ndarray:
    """Return normalized weights (linear scale) for unnormalized log-weights."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - log_sum_exp(lw))
    # guard rounding so the weights sum to 1 within 1e-10
    return w / w.sum()


def _check_normalized(w: np.ndarray) -> None:
    if w.ndim != 1 or w.size == 0:
        raise ContractViolation("weights must be a non-empty vector")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ContractViolation("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ContractViolation(f"weights sum to {w.sum()!r}, expected 1")


def ess(weights) -> float:
    """Effective sample size ``1 / sum(w**2)`` of normalized weights."""
    w = np.asarray(weights, dtype=float)
    _check_normalized(w)
    return float(1.0 / np.sum(w * w))


def ess_from_log_weights(log_weights) -> float:
    lw = np.asarray(log_weights, dtype=float)
    return float(np.exp(2.0 * log_sum_exp(lw) - log_sum_exp(2.0 * lw)))


def stratified_resample(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified resampling.

    One uniform draw in each stratum ``[j/count, (j+1)/count)`` is mapped
    through the inverse of the cumulative weights. Returned ancestor
    indices are sorted.
    """
    w = np.asarray(weights, dtype=float)
    _check_normalized(w)
    if count < 1:
        raise ContractViolation("count must be >= 1")
    u = (np.arange(count) + rng.random(count)) / count
    cdf = np.cumsum(w)
    # pin the top so rounding never routes a draw to trailing zero weights
    cdf[np.flatnonzero(w > 0)[-1]:] = 1.0
    return np.searchsorted(cdf, u, side="right")


# --------------------------------------------------------------------------
# particle systems and moments


@dataclass
class ParticleSystem:
    """``N`` parameter vectors (rows, unconstrained scale) with log-weights."""

    particles: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        n, d = self.particles.shape
        if n < 2 or d < 1:
            raise ContractViolation(f"particle matrix must be N>=2 by d>=1, got {n}x{d}")
        if self.log_weights.shape != (n,):
            raise ContractViolation("one log-weight per particle required")
        if not np.all(np.isfinite(self.particles)):
            raise ContractViolation("non-finite particle coordinates")

    @classmethod
    def equally_weighted(cls, particles) -> "ParticleSystem":
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        return cls(particles, np.full(particles.shape[0], -np.log(particles.shape[0])))

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    def ess(self) -> float:
        return ess(self.weights())

    def resample(self, rng: np.random.Generator, count: int | None = None) -> "ParticleSystem":
        idx = stratified_resample(self.weights(), count or self.size, rng)
        return ParticleSystem.equally_weighted(self.particles[idx])


def weighted_mean_cov(system: ParticleSystem) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and unbiased weighted covariance of a particle system.

    The covariance is ``sum w (x-m)(x-m)^T / (1 - sum w^2)``, which equals
    the usual ``n-1`` estimator for equal weights. A diagonal jitter of
    ``1e-8 * mean(diag)`` (absolute ``1e-8`` for an all-zero diagonal) is
    always added.
    """
    w = system.weights()
    sum_w2 = float(np.sum(w * w))
    if 1.0 / sum_w2 < 2.0 - 1e-9:
        raise ContractViolation("ESS < 2: covariance not estimable")
    x = system.particles
    mean = w @ x
    centered = x - mean
    cov = (centered * w[:, None]).T @ centered / (1.0 - sum_w2)
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += _jitter(cov)
    return mean, cov


def _jitter(cov: np.ndarray) -> float:
    scale = float(np.mean(np.diag(cov)))
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    return JITTER_SCALE * scale


def jittered_cholesky(cov) -> np.ndarray:
    """Lower Cholesky factor, doubling a diagonal jitter up to six times."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.all(np.isfinite(cov)):
        raise CovarianceDegenerateError("non-finite covariance")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eps = _jitter(cov)
    eye = np.eye(cov.shape[0])
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(cov + eps * eye)
        except np.linalg.LinAlgError:
            eps *= 2.0
    raise CovarianceDegenerateError("covariance not positive definite after jitter")


def mvn_sample(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``L`` the (jittered) Cholesky factor of ``cov``.

    With ``size`` given, returns a ``(size, d)`` matrix; ``mean`` may then be
    a ``(size, d)`` matrix of per-row centres.
    """
    chol = jittered_cholesky(cov)
    d = chol.shape[0]
    if size is None:
        z = rng.standard_normal(d)
        return np.asarray(mean, dtype=float) + chol @ z
    z = rng.standard_normal((size, d))
    return np.asarray(mean, dtype=float) + z @ chol.T


# --------------------------------------------------------------------------
# highest-density regions

HPD_GRID = 512
HPD_MIN_SAMPLES = 100


def _kde_on_grid(x: np.ndarray, bandwidth: float, grid: np.ndarray) -> np.ndarray:
    dens = np.zeros_like(grid)
    chunk = max(1, 2_000_000 // grid.size)
    for start in range(0, x.size, chunk):
        u = (grid[None, :] - x[start:start + chunk, None]) / bandwidth
        dens += np.exp(-0.5 * u * u).sum(axis=0)
    return dens / (x.size * bandwidth * np.sqrt(2.0 * np.pi))


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-0.2)


def kde_grid(samples, num: int = HPD_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Silverman's bandwidth on ``[min-3h, max+3h]``."""
    x = np.asarray(samples, dtype=float).ravel()
    h = silverman_bandwidth(x)
    if not h > 0:
        raise InsufficientSamplesError("zero-spread samples have no density estimate")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, num)
    return grid, _kde_on_grid(x, h, grid)


def hpd_region(samples, level: float = 0.9) -> list[tuple[float, float]]:
    """Highest-density region of a 1-D sample as disjoint ``(lo, hi)`` intervals.

    The density threshold is the ``1 - level`` quantile of the KDE evaluated
    at the samples themselves; the region is the superlevel set of the KDE
    on a 512-point grid, with edges refined by linear interpolation.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < HPD_MIN_SAMPLES:
        raise InsufficientSamplesError(f"need >= {HPD_MIN_SAMPLES} samples, got {x.size}")
    if not 0.0 < level < 1.0:
        raise ContractViolation("level must lie in (0, 1)")
    if x.max() == x.min():
        return [(float(x[0]), float(x[0]))]

    grid, dens = kde_grid(x)
    at_samples = np.interp(x, grid, dens)
    cutoff = float(np.quantile(at_samples, 1.0 - level))

    inside = dens >= cutoff
    edges = np.flatnonzero(np.diff(inside.astype(np.int8)))
    starts = list(edges[~inside[edges]] + 1)
    stops = list(edges[inside[edges]])
    if inside[0]:
        starts.insert(0, 0)
    if inside[-1]:
        stops.append(grid.size - 1)

    def crossing(i: int, j: int) -> float:
        # linear interpolation of the threshold between grid nodes i and j
        di, dj = dens[i], dens[j]
        if dj == di:
            return float(grid[j])
        t = (cutoff - di) / (dj - di)
        return float(grid[i] + t * (grid[j] - grid[i]))

    region = []
    for a, b in zip(starts, stops):
        lo = crossing(a - 1, a) if a > 0 else float(grid[0])
        hi = crossing(b + 1, b) if b < grid.size - 1 else float(grid[-1])
        region.append((lo, hi))
    return region


def in_region(value: float, region) -> bool:
    return any(lo <= value <= hi for lo, hi in region)
