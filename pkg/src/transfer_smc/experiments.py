"""Simulation studies: scenarios, the six-method panel and table aggregation.

Every random stream is derived from ``(root_seed, replicate, purpose[, k])``
so a replicate can be recomputed anywhere, in any order, with identical
results. Within a replicate the target data (and the posteriors that only
depend on it, True and BT) are shared across shift levels ``k``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import __version__
from .evaluation import (
    METHODS,
    MetricsRecord,
    clppd,
    ideal_metrics,
    loo,
    loo_fpp,
    loo_npp,
    rank_methods,
)
from .models import GENERATORS, get_model
from .smc import MutationConfig, fit_posterior
from .stats import ContractViolation, ParticleSystem, TsmcError, make_rng
from .tsmc import grid_search_me, run_tsmc, sample_npp

logger = logging.getLogger(__name__)

LINEAR_THETA = (5.0, 3.0, 2.0)
LINEAR_S_HAT = 0.15
LINEAR_S_HAT_VAR = 0.125
CURE_THETA = (0.163, -0.299, 0.120, -0.287, 0.276, 1.103, -0.538)
PILOT_SEED = 20240101
PILOT_PARTICLES = 4000
PILOT_SIZE = 340
FPP_LOO_MODES = ("reselect", "fixed")

# column groups averaged in the published tables
TABLE_GROUPS = {
    "linear": {"beta_bar": ("beta0", "beta1"), "sigma": ("sigma",)},
    "cure": {"avg": ("beta0", "beta1", "beta2", "beta3", "beta4", "k", "lam")},
}

# stream purposes
_TARGET, _AUX, _SOURCE = 0, 1, 2
_FIT = {"True": 10, "BT": 11, "BS": 12, "TSMC": 13, "NPP": 15, "FPP": 14, "BU": 16}
_LOO = {m: 20 + i for i, m in enumerate(METHODS)}


@dataclass(frozen=True)
class ScenarioConfig:
    example: str
    k: int
    theta_target: tuple
    theta_source: tuple
    n_target: int = 40
    n_source: int = 80
    replicates: int = 20
    particles: int = 1000
    root_seed: int = 1
    npp_prior: tuple = (1.0, 1.0)
    grid: int = 100
    npp_samples: int | None = None
    literal_clppd: bool = False
    fpp_loo: str = "reselect"
    initial_steps: int = 5
    delta: float = 1.0
    max_steps: int = 200
    loo_steps: int = 3
    s_hat: tuple = field(default=())

    @property
    def scenario_id(self) -> str:
        return f"{self.example}-k{self.k}"

    @property
    def mutation(self) -> MutationConfig:
        return MutationConfig(self.initial_steps, self.delta, self.max_steps)

    @property
    def loo_mutation(self) -> MutationConfig:
        return MutationConfig(self.loo_steps, self.delta, self.max_steps)


@dataclass(frozen=True)
class ShiftScheme:
    theta_target: tuple
    s_hat: tuple

    def source(self, example: str, k: int) -> tuple:
        t = np.asarray(self.theta_target, dtype=float)
        s = np.asarray(self.s_hat, dtype=float)
        if example == "linear":
            out = t + k * np.array([2 * s[0], -2 * s[1], s[2]])
        else:
            out = t + 2 * k * s
        return tuple(float(v) for v in out)


@lru_cache(maxsize=None)
def cure_pilot_s_hat(seed: int = PILOT_SEED, particles: int = PILOT_PARTICLES, n: int = PILOT_SIZE) -> tuple:
    """Marginal standard deviations of the true posterior from one fixed-seed pilot fit.

    The pilot dataset has the size of the pooled target and source
    (40 + 300), which is the data the True method conditions on.
    """
    model = get_model("cure")
    data = GENERATORS["cure"](n, CURE_THETA, make_rng(seed, 0))
    fit = fit_posterior(model, data, particles, MutationConfig(), make_rng(seed, 1))
    return tuple(float(v) for v in model.constrain(fit.particles).std(axis=0, ddof=1))


def shift_scheme(example: str, s_hat=None) -> ShiftScheme:
    if example == "linear":
        return ShiftScheme(LINEAR_THETA, (LINEAR_S_HAT, LINEAR_S_HAT, LINEAR_S_HAT_VAR))
    if example == "cure":
        return ShiftScheme(CURE_THETA, tuple(s_hat) if s_hat else cure_pilot_s_hat())
    raise ContractViolation(f"unknown example {example!r}")


def make_scenario(example: str, k: int, **overrides) -> ScenarioConfig:
    """Scenario with the published defaults; ``overrides`` are applied last."""
    if example not in ("linear", "cure"):
        raise ContractViolation(f"unknown example {example!r}")
    if overrides.get("fpp_loo", "reselect") not in FPP_LOO_MODES:
        raise ContractViolation(f"fpp_loo must be one of {FPP_LOO_MODES}")
    if k not in (0, 1, 2, 3):
        raise ContractViolation(f"shift level k must be in 0..3, got {k}")
    scheme = shift_scheme(example, overrides.get("s_hat"))
    base = ScenarioConfig(
        example=example,
        k=k,
        theta_target=scheme.theta_target,
        theta_source=scheme.source(example, k),
        n_source=80 if example == "linear" else 300,
        s_hat=scheme.s_hat,
    )
    cfg = replace(base, **overrides)
    if "s_hat" in overrides and "theta_source" not in overrides:
        cfg = replace(cfg, theta_source=ShiftScheme(cfg.theta_target, cfg.s_hat).source(example, k))
    return cfg


# --------------------------------------------------------------------------
# one replicate


@dataclass
class MethodFit:
    """A fitted posterior plus how its LOO must be computed."""

    posterior: ParticleSystem
    gamma: float = 1.0
    source: object = None
    alpha: object = 0.0
    npp: object = None
    trace: object = None


def _records_for(cfg: ScenarioConfig, replicate: int, method: str, fit: MethodFit, model, target, rng_metrics, rng_loo):
    post = fit.posterior
    if np.allclose(post.log_weights, post.log_weights[0]):
        samples = post.particles
    else:
        samples = post.resample(rng_metrics).particles
    b, m, s, c = ideal_metrics(model.constrain(samples), cfg.theta_target)
    cl = clppd(target, post, model, literal=cfg.literal_clppd)
    if fit.trace is not None:
        lo = loo_fpp(target, fit.trace, model, rng_loo, cfg.grid, cfg.loo_mutation, cfg.literal_clppd).total
    elif fit.npp is not None:
        lo = loo_npp(target, fit.npp, model, rng_loo, fit.source, cfg.loo_mutation, cfg.literal_clppd)
    else:
        lo = loo(target, post, model, rng_loo, source=fit.source, alpha=fit.alpha, gamma=fit.gamma,
                 config=cfg.loo_mutation, literal=cfg.literal_clppd)
    return MetricsRecord(cfg.scenario_id, cfg.k, replicate, method, model.natural_names, b, m, s, c, cl, lo)


def replicate_data(cfg: ScenarioConfig, replicate: int):
    """(target, true-process auxiliary, source) datasets of one replicate."""
    gen = GENERATORS[cfg.example]
    seed = cfg.root_seed
    target = gen(cfg.n_target, cfg.theta_target, make_rng(seed, replicate, _TARGET), "target")
    aux = gen(cfg.n_source, cfg.theta_target, make_rng(seed, replicate, _AUX), "source")
    source = gen(cfg.n_source, cfg.theta_source, make_rng(seed, replicate, _SOURCE), "source")
    return target, aux, source


def true_posterior(cfg: ScenarioConfig, replicate: int, model=None):
    """The True method's fit: target plus ``n_source`` extra draws from the target process."""
    model = model or get_model(cfg.example)
    target, aux, _ = replicate_data(cfg, replicate)
    rng = make_rng(cfg.root_seed, replicate, _FIT["True"])
    return fit_posterior(model, target.concat(aux), cfg.particles, cfg.mutation, rng)


def run_replicate_group(configs, replicate: int):
    """All six methods for each config (same example, differing ``k``) of one replicate.

    Returns ``(records, failed_ks)``. True and BT do not depend on ``k``
    and are fitted once.
    """
    configs = list(configs)
    first = configs[0]
    model = get_model(first.example)
    seed = first.root_seed
    n = first.particles
    records, failed = [], []

    shared = {}
    try:
        target, aux, _ = replicate_data(first, replicate)
        true_fit = true_posterior(first, replicate, model)
        bt_fit = fit_posterior(model, target, n, first.mutation, make_rng(seed, replicate, _FIT["BT"]))
        shared["True"] = MethodFit(true_fit.state.system, 1.0, aux, 1.0)
        shared["BT"] = MethodFit(bt_fit.state.system, 1.0, None, 0.0)
        shared_records = {
            m: _records_for(first, replicate, m, shared[m], model, target,
                            make_rng(seed, replicate, _FIT[m], 1), make_rng(seed, replicate, _LOO[m]))
            for m in ("True", "BT")
        }
    except TsmcError as exc:
        logger.warning("replicate %d failed in shared fits: %s", replicate, exc)
        return [], [c.k for c in configs]

    for cfg in configs:
        try:
            _, _, source = replicate_data(cfg, replicate)
            k = cfg.k
            fits = {}
            bs = fit_posterior(model, source, n, cfg.mutation, make_rng(seed, replicate, _FIT["BS"], k))
            fits["BS"] = MethodFit(bs.state.system, 0.0, None, 0.0)
            trace = run_tsmc(model, target, source, n, cfg.mutation, make_rng(seed, replicate, _FIT["TSMC"], k), seed)
            fits["BU"] = MethodFit(trace.snapshot(1, trace.n_rungs - 1), 1.0, source, 1.0)
            fpp = grid_search_me(trace, cfg.grid)
            fits["FPP"] = MethodFit(fpp.posterior, 1.0, source, fpp.alpha_star,
                                    trace=trace if cfg.fpp_loo == "reselect" else None)
            npp = sample_npp(trace, cfg.npp_samples or n, cfg.npp_prior, make_rng(seed, replicate, _FIT["NPP"], k))
            fits["NPP"] = MethodFit(ParticleSystem.equally_weighted(npp.thetas), 1.0, source, npp.alphas, npp)
            rows = []
            for m in METHODS:
                if m in shared_records:
                    rows.append(replace(shared_records[m], scenario_id=cfg.scenario_id, k=k))
                else:
                    rows.append(_records_for(cfg, replicate, m, fits[m], model, target,
                                             make_rng(seed, replicate, _FIT[m], 1, k),
                                             make_rng(seed, replicate, _LOO[m], k)))
            records.extend(rows)
        except TsmcError as exc:
            logger.warning("replicate %d, k=%d failed: %s", replicate, cfg.k, exc)
            failed.append(cfg.k)
    return records, failed


def run_replicate(config: ScenarioConfig, replicate_index: int) -> list:
    """Six :class:`MetricsRecord` rows (one per method) for one replicate."""
    records, failed = run_replicate_group([config], replicate_index)
    if failed:
        raise TsmcError(f"replicate {replicate_index} of {config.scenario_id} failed")
    return records


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    records: list
    failures: list  # (k, replicate)
    configs: list


def _group_job(args):
    configs, replicate = args
    return run_replicate_group(configs, replicate)


def run_experiment(configs, workers: int = 1) -> ExperimentResult:
    """Run every replicate of every config; results do not depend on ``workers``."""
    configs = sorted(configs, key=lambda c: c.k)
    replicates = configs[0].replicates
    if any(c.replicates != replicates or c.example != configs[0].example for c in configs):
        raise ContractViolation("configs must share example and replicate count")
    jobs = [(configs, r) for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_group_job, jobs))
    else:
        outputs = [_group_job(j) for j in jobs]
    records, failures = [], []
    for r, (recs, failed) in enumerate(outputs):
        records.extend(recs)
        failures.extend((k, r) for k in failed)
    order = {m: i for i, m in enumerate(METHODS)}
    records.sort(key=lambda rec: (rec.k, rec.replicate, order[rec.method]))
    if failures:
        logger.warning("%d replicate cells failed and are excluded", len(failures))
    return ExperimentResult(records, failures, configs)


# --------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateRow:
    k: int
    method: str
    n: int
    means: dict
    ses: dict


@dataclass
class AggregateTable:
    example: str
    rows: list
    groups: dict

    def row(self, k: int, method: str) -> AggregateRow:
        for r in self.rows:
            if r.k == k and r.method == method:
                return r
        raise KeyError((k, method))

    def columns(self) -> list:
        cols = []
        for metric in ("bias", "mse", "stdev", "cov"):
            cols += [f"{metric}_{g}" for g in self.groups]
        return cols + ["clppd", "c_rank", "loo", "l_rank"]


def _example_of(records) -> str:
    names = tuple(records[0].param_names)
    return "linear" if names == ("beta0", "beta1", "sigma") else "cure"


def aggregate(records, groups: dict | None = None) -> AggregateTable:
    """Average each metric per ``(k, method)``; ranks are per replicate then averaged.

    Rank pools are all methods present for that ``(k, replicate)``.
    """
    records = list(records)
    if not records:
        raise ContractViolation("nothing to aggregate")
    example = _example_of(records)
    groups = groups or TABLE_GROUPS.get(example, {"avg": tuple(records[0].param_names)})
    names = list(records[0].param_names)

    c_rank, l_rank = {}, {}
    by_cell: dict = {}
    for rec in records:
        by_cell.setdefault((rec.k, rec.replicate), []).append(rec)
    for cell in by_cell.values():
        if len(cell) < 2:
            continue
        cr = rank_methods([r.clppd for r in cell])
        lr = rank_methods([r.loo for r in cell])
        for rec, a, b in zip(cell, cr, lr):
            c_rank[id(rec)] = a
            l_rank[id(rec)] = b

    by_method: dict = {}
    for rec in records:
        by_method.setdefault((rec.k, rec.method), []).append(rec)

    order = {m: i for i, m in enumerate(METHODS)}
    rows = []
    for (k, method), recs in sorted(by_method.items(), key=lambda kv: (kv[0][0], order.get(kv[0][1], 99))):
        values: dict = {}
        for metric, attr in (("bias", "bias"), ("mse", "mse"), ("stdev", "stdev"), ("cov", "coverage_hit")):
            mat = np.array([getattr(r, attr) for r in recs], dtype=float)
            for j, name in enumerate(names):
                values[f"{metric}_{name}"] = mat[:, j]
            for g, members in groups.items():
                idx = [names.index(mname) for mname in members]
                values[f"{metric}_{g}"] = mat[:, idx].mean(axis=1)
        values["clppd"] = np.array([r.clppd for r in recs])
        values["loo"] = np.array([r.loo for r in recs])
        values["c_rank"] = np.array([c_rank.get(id(r), np.nan) for r in recs])
        values["l_rank"] = np.array([l_rank.get(id(r), np.nan) for r in recs])
        means = {key: float(np.mean(v)) for key, v in values.items()}
        ses = {key: (float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")) for key, v in values.items()}
        rows.append(AggregateRow(k, method, len(recs), means, ses))
    return AggregateTable(example, rows, groups)


def aggregate_to_csv(table: AggregateTable, seed=None) -> str:
    buf = io.StringIO()
    buf.write(f"# transfer-smc {__version__} seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    cols = table.columns()
    writer.writerow(["k", "method", "n"] + cols)
    for row in table.rows:
        writer.writerow([row.k, row.method, row.n] + [format(row.means[c], ".17g") for c in cols])
    return buf.getvalue()


def summary_json(table: AggregateTable, configs, failures, seed=None) -> str:
    doc = {
        "tool": f"transfer-smc {__version__}",
        "root_seed": seed,
        "example": table.example,
        "scenarios": [asdict(c) for c in configs],
        "failures": [{"k": k, "replicate": r} for k, r in failures],
        "cells": [
            {"k": r.k, "method": r.method, "n": r.n, "mean": r.means, "mc_se": r.ses}
            for r in table.rows
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))
