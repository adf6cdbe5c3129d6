"""Adaptive likelihood-annealing SMC.

Temperatures are chosen by bisection so that the effective sample size
after reweighting is ``N/2``; particles are then resampled (stratified) and
moved with a random-walk Metropolis kernel whose number of steps is tuned
from a short pilot run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .models import Dataset, ModelSpec
from .stats import (
    ContractViolation,
    DegenerateWeightsError,
    ParticleSystem,
    ess_from_log_weights,
    jittered_cholesky,
    log_sum_exp,
    stratified_resample,
    weighted_mean_cov,
)

logger = logging.getLogger(__name__)

BISECTION_TOL = 1e-8
BISECTION_MAX_ITER = 100


@dataclass(frozen=True)
class MutationConfig:
    """Settings for the self-tuning random-walk Metropolis move.

    ``initial_steps`` pilot steps minus one are used to estimate the
    acceptance rate; ``delta`` keeps that estimate away from zero and
    ``max_steps`` caps the total number of steps per particle.
    """

    initial_steps: int = 5
    delta: float = 1.0
    max_steps: int = 200

    def __post_init__(self):
        if self.initial_steps < 2:
            raise ContractViolation("initial_steps must be >= 2")
        if not 0.0 <= self.delta <= 1.0:
            raise ContractViolation("delta must lie in [0, 1]")
        if self.max_steps < self.initial_steps:
            raise ContractViolation("max_steps must be >= initial_steps")


@dataclass
class Components:
    """Per-particle pieces of a tempered log-density."""

    log_prior: np.ndarray
    target_ll: np.ndarray
    source_ll: np.ndarray

    def take(self, idx) -> "Components":
        return Components(self.log_prior[idx], self.target_ll[idx], self.source_ll[idx])

    def where(self, mask, other: "Components") -> "Components":
        return Components(
            np.where(mask, other.log_prior, self.log_prior),
            np.where(mask, other.target_ll, self.target_ll),
            np.where(mask, other.source_ll, self.source_ll),
        )


@dataclass
class AnnealedTarget:
    """``gamma * log p(y_T|theta) + alpha * log p(y_S|theta) + log prior``.

    ``alpha`` may be a per-particle vector. A missing dataset contributes
    zero and is never evaluated.
    """

    model: ModelSpec
    target_data: Dataset | None = None
    source_data: Dataset | None = None
    gamma: float = 1.0
    alpha: float | np.ndarray = 0.0

    def components(self, theta) -> Components:
        theta = np.atleast_2d(theta)
        zeros = np.zeros(theta.shape[0])
        lp = self.model.log_prior(theta)
        tl = self.model.log_lik(self.target_data, theta) if self.target_data is not None else zeros
        sl = self.model.log_lik(self.source_data, theta) if self.source_data is not None else zeros
        return Components(lp, tl, sl)

    def log_density(self, comps: Components) -> np.ndarray:
        out = comps.log_prior
        if self.target_data is not None and np.any(self.gamma != 0):
            out = out + self.gamma * comps.target_ll
        if self.source_data is not None and np.any(np.asarray(self.alpha) != 0):
            out = out + self.alpha * comps.source_ll
        return out

    def at(self, **temps) -> "AnnealedTarget":
        return replace(self, **temps)


@dataclass
class ChainState:
    system: ParticleSystem
    comps: Components


@dataclass
class MutationInfo:
    acceptance: float
    pilot_accepted: int
    steps: int
    clamped: bool


# --------------------------------------------------------------------------
# mutation


def steps_from_acceptance(p: float, initial_steps: int, max_steps: int | None = None) -> tuple[int, bool]:
    """Total Metropolis steps ``max(ceil(log 0.01 / log(1-p)), S)``.

    Returns ``(R, clamped)``; ``p >= 1`` gives ``R = S``.
    """
    if p >= 1.0:
        r = initial_steps
    elif p <= 0.0:
        r = math.inf
    else:
        r = max(math.ceil(math.log(0.01) / math.log1p(-p)), initial_steps)
    if max_steps is not None and r > max_steps:
        return max_steps, True
    return int(r), False


def _rw_step(theta, comps, logd, chol, target: AnnealedTarget, rng):
    n, d = theta.shape
    prop = theta + rng.standard_normal((n, d)) @ chol.T
    u = rng.random(n)
    prop_comps = target.components(prop)
    prop_logd = target.log_density(prop_comps)
    with np.errstate(invalid="ignore"):
        log_rho = prop_logd - logd
    accept = np.log(u) < log_rho
    theta = np.where(accept[:, None], prop, theta)
    comps = comps.where(accept, prop_comps)
    logd = np.where(accept, prop_logd, logd)
    return theta, comps, logd, int(accept.sum())


def mcmc_mutate(
    state: ChainState,
    target: AnnealedTarget,
    config: MutationConfig,
    rng: np.random.Generator,
) -> tuple[ChainState, MutationInfo]:
    """Self-tuning random-walk Metropolis move of an equally weighted system.

    The proposal covariance is the particle covariance, computed once. The
    acceptance count ``A`` over ``S-1`` pilot steps sets
    ``p = (A + delta) / ((S-1) N)``, and every particle is then advanced to
    ``R`` total steps.
    """
    system = state.system
    _, cov = weighted_mean_cov(ParticleSystem.equally_weighted(system.particles))
    chol = jittered_cholesky(cov)
    theta = system.particles.copy()
    comps = state.comps
    logd = target.log_density(comps)
    n = system.size
    s = config.initial_steps

    accepted = 0
    for _ in range(s - 1):
        theta, comps, logd, acc = _rw_step(theta, comps, logd, chol, target, rng)
        accepted += acc
    p = (accepted + config.delta) / ((s - 1) * n)
    total, clamped = steps_from_acceptance(p, s, config.max_steps)
    if clamped:
        logger.warning("acceptance rate %.3g needs more than %d MCMC steps; clamped", p, config.max_steps)
    for _ in range(s, total + 1):
        theta, comps, logd, _ = _rw_step(theta, comps, logd, chol, target, rng)

    new = ChainState(ParticleSystem(theta, np.full(n, -np.log(n))), comps)
    return new, MutationInfo(acceptance=p, pilot_accepted=accepted, steps=total, clamped=clamped)


# --------------------------------------------------------------------------
# temperature selection and reweighting


def _ess_after(log_weights, incr, step) -> float:
    with np.errstate(invalid="ignore"):
        lw = log_weights + step * incr
    lw = np.where(np.isnan(lw), -np.inf, lw)
    try:
        return ess_from_log_weights(lw)
    except DegenerateWeightsError:
        return 0.0


def coupled_next_temperature(systems, incrs, lower: float, target_ess: float) -> float:
    """Largest ``tau`` in ``[lower, 1]`` with ``min_c ESS_c(tau) >= target_ess``.

    ``ESS_c(tau)`` is the ESS of system ``c`` reweighted by
    ``exp((tau - lower) * incr_c)``. Found by bisection to ``1e-8``.
    """
    if not 0.0 <= lower < 1.0:
        raise ContractViolation("lower temperature must lie in [0, 1)")
    lws = [np.asarray(s.log_weights, dtype=float) for s in systems]
    incrs = [np.asarray(i, dtype=float) for i in incrs]
    if not all(np.any(np.isfinite(i)) for i in incrs):
        raise DegenerateWeightsError("incremental log-likelihood is nowhere finite")

    def min_ess(tau):
        return min(_ess_after(lw, inc, tau - lower) for lw, inc in zip(lws, incrs))

    if min_ess(1.0) >= target_ess:
        return 1.0
    lo, hi = lower, 1.0
    for _ in range(BISECTION_MAX_ITER):
        if hi - lo <= BISECTION_TOL:
            break
        mid = 0.5 * (lo + hi)
        if min_ess(mid) >= target_ess:
            lo = mid
        else:
            hi = mid
    if lo == lower:
        logger.warning("ESS falls below %.1f for every step above %.6g; taking minimal step", target_ess, lower)
        return hi
    return lo


def next_temperature(system: ParticleSystem, incremental_log_lik, lower: float, target_ess: float) -> float:
    """Single-chain version of :func:`coupled_next_temperature`."""
    return coupled_next_temperature([system], [incremental_log_lik], lower, target_ess)


def reweight_and_evidence(system: ParticleSystem, incremental_log_lik, delta_temp: float, running_log_evidence: float):
    """Return un-normalised new log-weights and the updated log-evidence.

    The evidence ratio is ``sum_i W_i exp(delta * incr_i)`` with ``W`` the
    normalised current weights.
    """
    if delta_temp < 0:
        raise ContractViolation("temperature increment must be non-negative")
    lw = np.asarray(system.log_weights, dtype=float)
    lw = lw - log_sum_exp(lw)
    if delta_temp == 0:
        return lw, float(running_log_evidence)
    with np.errstate(invalid="ignore"):
        new = lw + delta_temp * np.asarray(incremental_log_lik, dtype=float)
    new = np.where(np.isnan(new), -np.inf, new)
    return new, float(running_log_evidence + log_sum_exp(new))


# --------------------------------------------------------------------------
# annealing


@dataclass
class AnnealStep:
    """One rung of an annealing run (one entry per chain)."""

    temperature: float
    states: list
    log_evidence: list
    ess_before_resampling: list
    mutation: list = field(default_factory=list)


def initial_state(target: AnnealedTarget, n_particles: int, rng: np.random.Generator) -> ChainState:
    theta = target.model.sample_prior(rng, n_particles)
    return ChainState(ParticleSystem.equally_weighted(theta), target.components(theta))


def anneal(
    states: list,
    make_target,
    phase: str,
    start: float,
    config: MutationConfig,
    rng: np.random.Generator,
    log_evidence: list | None = None,
    target_ess: float | None = None,
    label: str = "",
) -> list:
    """Anneal one or more chains in lockstep from ``start`` to 1.

    ``make_target(c, temp)`` returns the tempered target of chain ``c``;
    ``phase`` names the moving likelihood (``"gamma"`` = target data,
    ``"alpha"`` = source data). Temperatures are coupled through the
    minimum ESS across chains. Returns the list of :class:`AnnealStep`.
    """
    if phase not in ("gamma", "alpha"):
        raise ContractViolation(f"unknown phase {phase!r}")
    if not 0.0 <= start < 1.0:
        raise ContractViolation("start temperature must lie in [0, 1)")
    n = states[0].system.size
    target_ess = n / 2 if target_ess is None else target_ess
    log_z = [0.0] * len(states) if log_evidence is None else list(log_evidence)
    temp = start
    steps = []
    while temp < 1.0:
        incrs = [s.comps.target_ll if phase == "gamma" else s.comps.source_ll for s in states]
        for c, incr in enumerate(incrs):
            if not np.any(np.isfinite(incr)):
                raise DegenerateWeightsError(f"{label}chain {c} degenerate at {phase}={temp:.6g}: "
                                             "log-likelihood is nowhere finite")
        new_temp = coupled_next_temperature([s.system for s in states], incrs, temp, target_ess)
        delta = new_temp - temp
        new_states, ess_pre, infos = [], [], []
        for c, (state, incr) in enumerate(zip(states, incrs)):
            try:
                lw, log_z[c] = reweight_and_evidence(state.system, incr, delta, log_z[c])
            except DegenerateWeightsError as exc:
                raise DegenerateWeightsError(f"{label}chain {c} degenerate at {phase}={new_temp:.6g}: {exc}") from None
            weighted = ParticleSystem(state.system.particles, lw)
            ess_pre.append(weighted.ess())
            idx = stratified_resample(weighted.weights(), n, rng)
            moved, info = mcmc_mutate(
                ChainState(ParticleSystem.equally_weighted(weighted.particles[idx]), state.comps.take(idx)),
                make_target(c, new_temp),
                config,
                rng,
            )
            new_states.append(moved)
            infos.append(info)
        states = new_states
        temp = new_temp
        steps.append(AnnealStep(temp, states, list(log_z), ess_pre, infos))
    return steps


def anneal_phase(
    state: ChainState,
    model: ModelSpec,
    target_data: Dataset | None,
    source_data: Dataset | None,
    phase: str,
    fixed_other: float,
    start: float,
    config: MutationConfig,
    rng: np.random.Generator,
    log_evidence: float = 0.0,
):
    """Anneal a single chain's ``gamma`` or ``alpha`` from ``start`` to 1.

    Returns ``([(temperature, snapshot, log_evidence), ...], final_state)``.
    """
    base = AnnealedTarget(model, target_data, source_data)

    def make(_, temp):
        if phase == "gamma":
            return base.at(gamma=temp, alpha=fixed_other)
        return base.at(gamma=fixed_other, alpha=temp)

    steps = anneal([state], make, phase, start, config, rng, [log_evidence])
    trace = [(s.temperature, s.states[0], s.log_evidence[0]) for s in steps]
    return trace, (steps[-1].states[0] if steps else state)


@dataclass
class SmcResult:
    """Equally weighted posterior particles and the log-evidence estimate."""

    state: ChainState
    log_evidence: float
    temperatures: list

    @property
    def particles(self) -> np.ndarray:
        return self.state.system.particles


def fit_posterior(
    model: ModelSpec,
    data: Dataset,
    n_particles: int,
    config: MutationConfig,
    rng: np.random.Generator,
) -> SmcResult:
    """Anneal from the prior to the posterior given ``data``."""
    state = initial_state(AnnealedTarget(model, data, None, gamma=0.0), n_particles, rng)
    trace, final = anneal_phase(state, model, data, None, "gamma", 0.0, 0.0, config, rng)
    return SmcResult(final, trace[-1][2], [t for t, _, _ in trace])
