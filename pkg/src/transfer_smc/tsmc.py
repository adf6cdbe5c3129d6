"""Transfer SMC: two coupled annealing chains and what can be read off them.

Chain 1 first anneals the target likelihood (``gamma: 0 -> 1``), then both
chains anneal the source likelihood (``alpha: 0 -> 1``); chain 0 never sees
the target data. Every ``alpha`` rung stores both chains' particles, their
source log-likelihoods and the running log normalising constants
``log C_S(alpha)`` (chain 0) and ``log C_TS(alpha)`` (chain 1), so that
``C_T(alpha) = C_TS(alpha) / C_S(alpha)`` is available for any ``alpha`` with a
single importance-sampling step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .models import COLUMNS, Dataset, ModelSpec, get_model
from .smc import AnnealedTarget, ChainState, MutationConfig, anneal, anneal_phase, initial_state
from .stats import (
    ContractViolation,
    DegenerateWeightsError,
    ParticleSystem,
    log_sum_exp,
    normalize_log_weights,
    stratified_resample,
)

TRACE_FORMAT = 1
DEFAULT_GRID = 100
MIN_PARTICLES = 100


@dataclass
class TsmcTrace:
    """Stored ladder of a transfer SMC run.

    Arrays indexed by rung ``j`` refer to ``alpha_ladder[j]``; rung 0 is
    ``alpha = 0`` (prior draws for chain 0, the target-only posterior for
    chain 1).
    """

    gamma_ladder: np.ndarray
    phase1_log_evidence: np.ndarray
    alpha_ladder: np.ndarray
    chain0_particles: np.ndarray
    chain1_particles: np.ndarray
    chain0_source_ll: np.ndarray
    chain1_source_ll: np.ndarray
    log_c0: np.ndarray
    log_c1: np.ndarray
    ess0: np.ndarray
    ess1: np.ndarray
    model: ModelSpec | None = None
    target: Dataset | None = None
    source: Dataset | None = None
    root_seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.chain1_particles.shape[1]

    @property
    def n_rungs(self) -> int:
        return self.alpha_ladder.size

    @property
    def log_evidence_target(self) -> float:
        """Phase-1 log-evidence ``log Z_T``."""
        return float(self.log_c1[0])

    def joint_ladder(self) -> tuple[np.ndarray, np.ndarray]:
        """Full ``(gamma_t, alpha_t)`` sequence over both phases."""
        gammas = np.concatenate([self.gamma_ladder, np.ones(self.n_rungs - 1)])
        alphas = np.concatenate([np.zeros(self.gamma_ladder.size), self.alpha_ladder[1:]])
        return gammas, alphas

    def snapshot(self, chain: int, rung: int) -> ParticleSystem:
        parts = self.chain1_particles if chain == 1 else self.chain0_particles
        return ParticleSystem.equally_weighted(parts[rung])


def _stack(states, attr):
    return np.stack([getattr(s.comps, attr) if attr != "particles" else s.system.particles for s in states])


def run_tsmc(
    model: ModelSpec,
    target: Dataset,
    source: Dataset,
    n_particles: int,
    config: MutationConfig,
    rng: np.random.Generator,
    root_seed: int | None = None,
) -> TsmcTrace:
    """Run both phases of transfer SMC and return the stored ladder."""
    if n_particles < MIN_PARTICLES:
        raise ContractViolation(f"need at least {MIN_PARTICLES} particles, got {n_particles}")
    init0 = AnnealedTarget(model, None, source, gamma=0.0, alpha=0.0)
    init1 = AnnealedTarget(model, target, None, gamma=0.0, alpha=0.0)
    chain1 = initial_state(init1, n_particles, rng)
    chain0 = initial_state(init0, n_particles, rng)

    try:
        phase1, chain1 = anneal_phase(chain1, model, target, None, "gamma", 0.0, 0.0, config, rng)
    except DegenerateWeightsError as exc:
        raise DegenerateWeightsError(f"chain 1 (target phase): {exc}") from None
    gammas = np.array([0.0] + [t for t, _, _ in phase1])
    log_z = np.array([0.0] + [z for _, _, z in phase1])

    both = AnnealedTarget(model, target, source, gamma=1.0, alpha=0.0)
    chain1 = ChainState(chain1.system, both.components(chain1.system.particles))

    def make(c, alpha):
        return init0.at(alpha=alpha) if c == 0 else both.at(alpha=alpha)

    steps = anneal([chain0, chain1], make, "alpha", 0.0, config, rng, [0.0, float(log_z[-1])])

    rungs = [[chain0, chain1]] + [s.states for s in steps]
    c0 = [r[0] for r in rungs]
    c1 = [r[1] for r in rungs]
    return TsmcTrace(
        gamma_ladder=gammas,
        phase1_log_evidence=log_z,
        alpha_ladder=np.array([0.0] + [s.temperature for s in steps]),
        chain0_particles=_stack(c0, "particles"),
        chain1_particles=_stack(c1, "particles"),
        chain0_source_ll=_stack(c0, "source_ll"),
        chain1_source_ll=_stack(c1, "source_ll"),
        log_c0=np.array([0.0] + [s.log_evidence[0] for s in steps]),
        log_c1=np.array([float(log_z[-1])] + [s.log_evidence[1] for s in steps]),
        ess0=np.array([np.nan] + [s.ess_before_resampling[0] for s in steps]),
        ess1=np.array([np.nan] + [s.ess_before_resampling[1] for s in steps]),
        model=model,
        target=target,
        source=source,
        root_seed=root_seed,
        meta={"model": model.name, "n_particles": n_particles},
    )


# --------------------------------------------------------------------------
# reading the ladder


@dataclass
class IsUpdate:
    """Chain-1 weighted particles and both log-constants at one ``alpha``."""

    alpha: float
    rung: int
    posterior: ParticleSystem
    log_c_source: float
    log_c_joint: float
    chain0_log_weights: np.ndarray

    @property
    def log_c_target(self) -> float:
        return self.log_c_joint - self.log_c_source


def rung_below(trace: TsmcTrace, alpha: float) -> int:
    return int(np.searchsorted(trace.alpha_ladder, alpha, side="right") - 1)


def is_update(trace: TsmcTrace, alpha_is: float) -> IsUpdate:
    """Importance-sample from the highest stored rung ``alpha_h <= alpha_is``.

    Both chains' rung-``h`` particles are reweighted by
    ``p(y_S|theta)^(alpha_is - alpha_h)`` and each log-constant is advanced by
    the log of the mean weight.
    """
    if not 0.0 <= alpha_is <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha_is}")
    h = rung_below(trace, alpha_is)
    step = alpha_is - trace.alpha_ladder[h]
    log_n = np.log(trace.n_particles)
    if step == 0.0:
        lw0 = np.zeros(trace.n_particles)
        lw1 = lw0
    else:
        lw0 = step * trace.chain0_source_ll[h]
        lw1 = step * trace.chain1_source_ll[h]
    log_c0 = float(trace.log_c0[h] + log_sum_exp(lw0) - log_n)
    log_c1 = float(trace.log_c1[h] + log_sum_exp(lw1) - log_n)
    posterior = ParticleSystem(trace.chain1_particles[h], lw1 - log_sum_exp(lw1))
    return IsUpdate(float(alpha_is), h, posterior, log_c0, log_c1, lw0 - log_sum_exp(lw0))


def log_c_target(trace: TsmcTrace, alphas) -> np.ndarray:
    """``log C_T(alpha)`` for each ``alpha`` (vectorised :func:`is_update`)."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    if np.any((alphas < 0) | (alphas > 1)):
        raise ContractViolation("alpha must lie in [0, 1]")
    out = np.empty(alphas.size)
    for i, a in enumerate(alphas):
        out[i] = is_update(trace, a).log_c_target
    return out


@dataclass
class FppResult:
    alpha_star: float
    posterior: ParticleSystem
    grid: np.ndarray
    log_c_target: np.ndarray

    @property
    def logC_T_grid(self):
        return list(zip(self.grid.tolist(), self.log_c_target.tolist()))


def evaluation_grid(trace: TsmcTrace, points: int = DEFAULT_GRID) -> np.ndarray:
    if points < 2:
        raise ContractViolation("grid needs at least two points")
    return np.union1d(trace.alpha_ladder, np.arange(points + 1) / points)


def argmax_smallest(values) -> int:
    """Index of the maximum; near-ties (1e-12 relative, 1e-10 absolute) go to the first."""
    values = np.asarray(values, dtype=float)
    best = np.nanmax(values)
    return int(np.flatnonzero(np.isclose(values, best, rtol=1e-12, atol=1e-10))[0])


def grid_search_me(trace: TsmcTrace, points: int = DEFAULT_GRID, rng=None) -> FppResult:
    """Choose ``alpha`` maximising the estimated model evidence ``C_T(alpha)``.

    The grid is the ordered union of the stored rungs and
    ``{0, 1/P, ..., 1}``. Near-ties go to the smallest ``alpha``.
    """
    grid = evaluation_grid(trace, points)
    values = log_c_target(trace, grid)
    if not np.any(np.isfinite(values)):
        raise DegenerateWeightsError("model evidence is non-finite on the whole grid")
    j = argmax_smallest(values)
    upd = is_update(trace, grid[j])
    return FppResult(float(grid[j]), upd.posterior, grid, values)


@dataclass
class NppResult:
    """Joint draws ``(theta, alpha)`` from the normalised power prior posterior."""

    thetas: np.ndarray
    alphas: np.ndarray
    prior_alphas: np.ndarray
    alpha_marginal_weights: np.ndarray
    log_c_target: np.ndarray

    @property
    def joint_samples(self):
        return list(zip(self.thetas, self.alphas))


def sample_npp(
    trace: TsmcTrace,
    n_samples: int,
    alpha_prior: tuple[float, float] = (1.0, 1.0),
    rng: np.random.Generator | None = None,
) -> NppResult:
    """Joint sampling of ``(theta, alpha)``.

    Prior draws ``alpha_i ~ Beta(a, b)`` are weighted by ``C_T(alpha_i)``,
    resampled (stratified, with replacement), and each resampled
    ``alpha`` is paired with one draw from the chain-1 particles
    importance-weighted to that ``alpha``.
    """
    a, b = alpha_prior
    if n_samples < 1 or not (a > 0 and b > 0):
        raise ContractViolation("need n_samples >= 1 and positive Beta parameters")
    if rng is None:
        raise ContractViolation("sample_npp needs an explicit random stream")
    prior_alphas = rng.beta(a, b, n_samples)
    log_ct = log_c_target(trace, prior_alphas)
    if not np.any(np.isfinite(log_ct)):
        raise DegenerateWeightsError("C_T is non-finite at every prior draw")
    weights = normalize_log_weights(np.where(np.isfinite(log_ct), log_ct, -np.inf))
    picks = stratified_resample(weights, n_samples, rng)

    d = trace.chain1_particles.shape[2]
    thetas = np.empty((n_samples, d))
    unique, starts, counts = np.unique(picks, return_index=True, return_counts=True)
    for j, start, count in zip(unique, starts, counts):
        post = is_update(trace, prior_alphas[j]).posterior
        rows = rng.choice(post.size, size=count, p=post.weights())
        thetas[start:start + count] = post.particles[rows]
    return NppResult(thetas, prior_alphas[picks], prior_alphas, weights, log_ct)


# --------------------------------------------------------------------------
# persistence

_ARRAYS = (
    "gamma_ladder",
    "phase1_log_evidence",
    "alpha_ladder",
    "chain0_particles",
    "chain1_particles",
    "chain0_source_ll",
    "chain1_source_ll",
    "log_c0",
    "log_c1",
    "ess0",
    "ess1",
)


def save_trace(trace: TsmcTrace, path) -> None:
    """Write a trace as a versioned ``.npz`` container (bit-exact round trip)."""
    header = {
        "format": TRACE_FORMAT,
        "tool": f"transfer-smc {__version__}",
        "model": trace.model.name if trace.model is not None else trace.meta.get("model"),
        "root_seed": trace.root_seed,
        "meta": trace.meta,
    }
    arrays = {name: getattr(trace, name) for name in _ARRAYS}
    for role, data in (("target", trace.target), ("source", trace.source)):
        if data is not None:
            header[f"{role}_kind"] = data.kind
            for col in COLUMNS[data.kind]:
                arrays[f"{role}__{col}"] = data[col]
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_trace(path, model: ModelSpec | None = None) -> TsmcTrace:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != TRACE_FORMAT:
            raise ContractViolation(f"{path}: unsupported trace format {header.get('format')}")
        arrays = {name: z[name] for name in _ARRAYS}
        datasets = {}
        for role in ("target", "source"):
            kind = header.get(f"{role}_kind")
            if kind:
                datasets[role] = Dataset(kind, role, {c: z[f"{role}__{c}"] for c in COLUMNS[kind]})
    if model is None and header.get("model") in ("linear", "cure"):
        model = get_model(header["model"])
    return TsmcTrace(
        **arrays,
        model=model,
        target=datasets.get("target"),
        source=datasets.get("source"),
        root_seed=header.get("root_seed"),
        meta=header.get("meta", {}),
    )
