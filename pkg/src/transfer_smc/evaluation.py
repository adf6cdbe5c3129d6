"""Posterior quality metrics.

Ideal metrics need the true parameter (bias, MSE, St. Dev., HPD coverage);
predictive metrics only need the target data (CLPPD and leave-one-out
cross-validation by importance reweighting with a particle refresh).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .models import Dataset, ModelSpec
from .smc import AnnealedTarget, ChainState, MutationConfig, mcmc_mutate
from .stats import (
    ContractViolation,
    ParticleSystem,
    ess,
    hpd_region,
    in_region,
    normalize_log_weights,
    stratified_resample,
)

logger = logging.getLogger(__name__)

METHODS = ("True", "BT", "BS", "BU", "FPP", "NPP")
LOO_REFRESH = MutationConfig(initial_steps=3)
LOW_ESS = 10.0


# --------------------------------------------------------------------------
# ideal metrics


def bias(samples, theta_star: float) -> float:
    return float(abs(np.mean(samples) - theta_star))


def mse(samples, theta_star: float) -> float:
    s = np.asarray(samples, dtype=float)
    return float(np.mean((s - theta_star) ** 2))


def stdev(samples) -> float:
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        raise ContractViolation("stdev needs at least two samples")
    return float(np.std(s, ddof=1))


def coverage_hit(samples, theta_star: float, level: float = 0.9) -> int:
    """1 if ``theta_star`` lies in the HPD region of ``samples`` at ``level``."""
    return int(in_region(theta_star, hpd_region(samples, level)))


# --------------------------------------------------------------------------
# predictive metrics


def _as_system(posterior) -> ParticleSystem:
    if isinstance(posterior, ParticleSystem):
        return posterior
    return ParticleSystem.equally_weighted(posterior)


def _log_mean_lik(pointwise: np.ndarray, log_w: np.ndarray, literal: bool) -> np.ndarray:
    """Per-observation log of the weighted mean likelihood (or mean log-likelihood)."""
    if literal:
        return np.exp(log_w) @ pointwise
    with np.errstate(divide="ignore"):
        return logsumexp(pointwise + log_w[:, None], axis=0)


def clppd(target: Dataset, posterior, model: ModelSpec, literal: bool = False) -> float:
    """Computed log pointwise predictive density on the target data.

    ``sum_i log sum_j W_j p(y_i | theta_j)``; with ``literal=True`` the
    per-observation term is the weighted mean of ``log p(y_i | theta_j)``.
    """
    system = _as_system(posterior)
    log_w = np.log(system.weights())
    terms = _log_mean_lik(model.pointwise_log_lik(target, system.particles), log_w, literal)
    if not np.all(np.isfinite(terms)):
        logger.warning("zero predictive density at %d target points", int(np.sum(~np.isfinite(terms))))
    return float(np.sum(terms))


@dataclass
class LooResult:
    pointwise: np.ndarray
    low_ess: int = 0
    ess: np.ndarray = field(default_factory=lambda: np.array([]))
    alphas: np.ndarray | None = None

    @property
    def total(self) -> float:
        return float(np.sum(self.pointwise))


def loo_pointwise(
    target: Dataset,
    posterior,
    model: ModelSpec,
    rng: np.random.Generator,
    source: Dataset | None = None,
    alpha: float | np.ndarray = 0.0,
    gamma: float = 1.0,
    config: MutationConfig = LOO_REFRESH,
    literal: bool = False,
) -> LooResult:
    """Leave-one-out predictive terms by importance reweighting plus refresh.

    ``posterior`` approximates ``p(y_T|theta)^gamma p(y_S|theta)^alpha pi(theta)``
    (``alpha`` may be per particle). For each target point ``i`` the
    particles are reweighted by ``p(y_i|theta)^-gamma``, stratified-resampled
    and refreshed by the self-tuning Metropolis move targeting the
    posterior without ``y_i``; the term is the log mean likelihood of
    ``y_i`` under the refreshed particles. With ``gamma = 0`` the target
    never entered the posterior, so the term is read off directly.
    """
    system = _as_system(posterior)
    n_obs = len(target)
    theta = system.particles
    log_w = np.log(system.weights())
    pointwise = model.pointwise_log_lik(target, theta)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim and alpha.shape != (system.size,):
        raise ContractViolation("per-particle alpha must match the particle count")
    if not np.any(alpha != 0):
        source = None

    if gamma == 0:
        terms = _log_mean_lik(pointwise, log_w, literal)
        return LooResult(terms, 0, np.full(n_obs, ess(system.weights())))

    streams = rng.spawn(n_obs)
    terms = np.empty(n_obs)
    esses = np.empty(n_obs)
    for i in range(n_obs):
        terms[i], esses[i] = _held_out_term(target, i, theta, log_w - gamma * pointwise[:, i], model, source,
                                            alpha, gamma, config, literal, streams[i])
    return _loo_result(terms, esses)


def _held_out_term(target, i, theta, log_w, model, source, alpha, gamma, config, literal, rng):
    """Resample by ``log_w``, refresh towards the posterior without ``y_i``, score ``y_i``."""
    w = normalize_log_weights(log_w)
    idx = stratified_resample(w, theta.shape[0], rng)
    rest = target.without(i) if len(target) > 1 else None
    alpha = np.asarray(alpha, dtype=float)
    loo_target = AnnealedTarget(model, rest, source, gamma=gamma, alpha=alpha[idx] if alpha.ndim else float(alpha))
    parts = theta[idx]
    state = ChainState(ParticleSystem.equally_weighted(parts), loo_target.components(parts))
    moved, _ = mcmc_mutate(state, loo_target, config, rng)
    held_out = model.pointwise_log_lik(target.subset([i]), moved.system.particles)
    return _log_mean_lik(held_out, np.log(moved.system.weights()), literal)[0], ess(w)


def _loo_result(terms, esses) -> LooResult:
    low = int(np.sum(esses < LOW_ESS))
    if low:
        logger.warning("LOO: %d of %d held-out points had reweighted ESS < %g", low, len(terms), LOW_ESS)
    return LooResult(terms, low, esses)


def loo(target, posterior, model, rng, **kwargs) -> float:
    """Sum of :func:`loo_pointwise` terms."""
    return loo_pointwise(target, posterior, model, rng, **kwargs).total


def loo_npp(target: Dataset, npp_result, model: ModelSpec, rng: np.random.Generator, source: Dataset | None,
            config: MutationConfig = LOO_REFRESH, literal: bool = False) -> float:
    """LOO for joint ``(theta, alpha)`` draws; each particle keeps its own ``alpha``."""
    return loo(target, npp_result.thetas, model, rng, source=source, alpha=np.asarray(npp_result.alphas),
               config=config, literal=literal)


def loo_fpp(target: Dataset, trace, model: ModelSpec, rng: np.random.Generator, points: int = 100,
            config: MutationConfig = LOO_REFRESH, literal: bool = False) -> LooResult:
    """LOO for the fixed power prior with ``alpha`` re-selected without each held-out point.

    The transfer parameter is chosen from the target data, so holding
    ``alpha*`` fixed lets ``y_i`` leak into its own prediction. For each
    ``i`` the evidence of ``y_{-i}`` is read off the stored ladder as
    ``C_{T-i}(alpha) = C_T(alpha) E_alpha[1 / p(y_i|theta)]`` on the same
    grid as the full-data search; ``alpha_i`` is its maximiser (ties to
    the smallest ``alpha``), and ``y_i`` is then scored exactly as in
    :func:`loo_pointwise` at ``alpha_i``.
    """
    from .tsmc import argmax_smallest, evaluation_grid, is_update

    grid = evaluation_grid(trace, points)
    updates = [is_update(trace, a) for a in grid]
    by_rung = {}
    inv = np.empty((grid.size, len(target)))
    for g, upd in enumerate(updates):
        if upd.rung not in by_rung:
            by_rung[upd.rung] = model.pointwise_log_lik(target, upd.posterior.particles)
        with np.errstate(divide="ignore"):
            inv[g] = logsumexp(upd.posterior.log_weights[:, None] - by_rung[upd.rung], axis=0)
    log_ct = np.array([u.log_c_target for u in updates])
    streams = rng.spawn(len(target))
    terms = np.empty(len(target))
    esses = np.empty(len(target))
    chosen = np.empty(len(target))
    for i in range(len(target)):
        g = argmax_smallest(log_ct + inv[:, i])
        upd = updates[g]
        chosen[i] = grid[g]
        pw = by_rung[upd.rung][:, i]
        terms[i], esses[i] = _held_out_term(target, i, upd.posterior.particles, upd.posterior.log_weights - pw,
                                            model, trace.source, grid[g], 1.0, config, literal, streams[i])
    result = _loo_result(terms, esses)
    result.alphas = chosen
    return result


def rank_methods(values, higher_is_better: bool = True) -> np.ndarray:
    """Rank 1 = best; ties share the average rank; non-finite values rank last."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ContractViolation("ranking needs at least two methods")
    key = -v if higher_is_better else v.copy()
    key[~np.isfinite(v)] = np.inf
    order = np.argsort(key, kind="stable")
    ranks = np.empty(v.size)
    sorted_keys = key[order]
    start = 0
    while start < v.size:
        stop = start
        while stop + 1 < v.size and sorted_keys[stop + 1] == sorted_keys[start]:
            stop += 1
        ranks[order[start:stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


# --------------------------------------------------------------------------
# metrics records


@dataclass
class MetricsRecord:
    """One (scenario, replicate, method) row of metrics."""

    scenario_id: str
    k: int
    replicate: int
    method: str
    param_names: tuple
    bias: np.ndarray
    mse: np.ndarray
    stdev: np.ndarray
    coverage_hit: np.ndarray
    clppd: float
    loo: float

    def as_row(self) -> dict:
        row = {"scenario_id": self.scenario_id, "k": self.k, "replicate": self.replicate, "method": self.method}
        for metric in ("bias", "mse", "stdev"):
            for name, v in zip(self.param_names, getattr(self, metric)):
                row[f"{metric}_{name}"] = float(v)
        for name, v in zip(self.param_names, self.coverage_hit):
            row[f"cov_{name}"] = int(v)
        row["clppd"] = self.clppd
        row["loo"] = self.loo
        return row


def record_header(param_names) -> list:
    cols = ["scenario_id", "k", "replicate", "method"]
    for metric in ("bias", "mse", "stdev", "cov"):
        cols += [f"{metric}_{n}" for n in param_names]
    return cols + ["clppd", "loo"]


def ideal_metrics(samples_natural: np.ndarray, theta_star, level: float = 0.9):
    """Per-parameter bias, MSE, St. Dev. and coverage hit of natural-scale samples."""
    s = np.atleast_2d(samples_natural)
    theta_star = np.asarray(theta_star, dtype=float)
    cols = range(s.shape[1])
    return (
        np.array([bias(s[:, j], theta_star[j]) for j in cols]),
        np.array([mse(s[:, j], theta_star[j]) for j in cols]),
        np.array([stdev(s[:, j]) for j in cols]),
        np.array([coverage_hit(s[:, j], theta_star[j], level) for j in cols]),
    )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def records_to_csv(records, seed=None) -> str:
    records = list(records)
    if not records:
        raise ContractViolation("no records to write")
    header = record_header(records[0].param_names)
    buf = io.StringIO()
    buf.write(f"# transfer-smc {__version__} seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for rec in records:
        row = rec.as_row()
        writer.writerow([_fmt(row[c]) for c in header])
    return buf.getvalue()


class MalformedRecordsError(ContractViolation):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_records(path) -> list:
    """Parse a records CSV back into :class:`MetricsRecord` objects."""
    records = []
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            cells = next(csv.reader([line]))
            if header is None:
                header = cells
                if header[:4] != ["scenario_id", "k", "replicate", "method"] or header[-2:] != ["clppd", "loo"]:
                    raise MalformedRecordsError(lineno, "unexpected header")
                names = [c[len("bias_"):] for c in header if c.startswith("bias_")]
                continue
            if len(cells) != len(header):
                raise MalformedRecordsError(lineno, f"expected {len(header)} fields, got {len(cells)}")
            row = dict(zip(header, cells))
            try:
                records.append(
                    MetricsRecord(
                        scenario_id=row["scenario_id"],
                        k=int(row["k"]),
                        replicate=int(row["replicate"]),
                        method=row["method"],
                        param_names=tuple(names),
                        bias=np.array([float(row[f"bias_{n}"]) for n in names]),
                        mse=np.array([float(row[f"mse_{n}"]) for n in names]),
                        stdev=np.array([float(row[f"stdev_{n}"]) for n in names]),
                        coverage_hit=np.array([int(row[f"cov_{n}"]) for n in names]),
                        clppd=float(row["clppd"]),
                        loo=float(row["loo"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise MalformedRecordsError(lineno, str(exc)) from None
    if header is None:
        raise MalformedRecordsError(0, "empty records file")
    return records
