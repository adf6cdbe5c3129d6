"""Command-line interface: ``simulate``, ``fit``, ``experiment`` and ``report``.

Exit codes: 0 success, 1 internal or sampler error, 2 user/config error,
3 experiment finished with failed replicates.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from . import __version__
from .evaluation import METHODS, read_records
from .experiments import (
    TABLE_GROUPS,
    aggregate,
    aggregate_to_csv,
    make_scenario,
    run_experiment,
    summary_json,
)
from .models import GENERATORS, get_model, read_dataset, write_dataset
from .smc import MutationConfig, fit_posterior
from .stats import ContractViolation, TsmcError, kde_grid, make_rng
from .tsmc import grid_search_me, run_tsmc, sample_npp, save_trace

logger = logging.getLogger("transfer_smc")

EXIT_OK, EXIT_INTERNAL, EXIT_USER, EXIT_PARTIAL = 0, 1, 2, 3
PAPER_SCALE = {"replicates": 100, "particles": 2000}


class UserError(Exception):
    """Bad input from the command line or config file."""


def _header(seed) -> str:
    return f"# transfer-smc {__version__} seed={seed}\n"


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise UserError(f"expected a list of numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise UserError(f"expected a list of integers, got {text!r}") from None


def _load_config(path, section: str) -> dict:
    """Values of ``[section]`` (and ``[common]``) from an INI file."""
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UserError(f"cannot parse config {path}: {exc}") from None
    out = {}
    for name in ("common", section):
        if parser.has_section(name):
            out.update({k.replace("-", "_"): v for k, v in parser.items(name)})
    return out


def _resolve(args, config: dict, key: str, convert, default):
    """Flag beats config file beats default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        try:
            return convert(config[key])
        except (UserError, ValueError):
            raise UserError(f"bad value for {key!r} in config: {config[key]!r}") from None
    return default


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UserError(f"expected a boolean, got {text!r}")


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc.strerror}") from None


def _effective_config(section: str, values: dict) -> str:
    parser = configparser.ConfigParser()
    parser[section] = {k: " ".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return f"# transfer-smc {__version__} seed={values.get('seed')}\n" + buf.getvalue()


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    config = _load_config(args.config, "simulate")
    example = _resolve(args, config, "example", str, None)
    if example not in GENERATORS:
        raise UserError(f"--example must be one of {sorted(GENERATORS)}")
    seed = _resolve(args, config, "seed", int, 1)
    role = _resolve(args, config, "role", str, "target")
    if role not in ("target", "source"):
        raise UserError("--role must be target or source")
    theta = _resolve(args, config, "theta", _floats, None)
    if theta is None:
        k = _resolve(args, config, "k", int, 0)
        scenario = make_scenario(example, k)
        theta = scenario.theta_target if role == "target" else scenario.theta_source
    n = _resolve(args, config, "n", int, None)
    if n is None:
        n = 40 if role == "target" else make_scenario(example, 0).n_source
    if n < 1:
        raise UserError("--n must be positive")
    data = GENERATORS[example](n, theta, make_rng(seed), role)
    if args.out:
        out = Path(args.out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            write_dataset(data, out, seed=seed)
        except OSError as exc:
            raise UserError(f"cannot write {out}: {exc.strerror}") from None
    else:
        from .models import dataset_to_csv

        sys.stdout.write(dataset_to_csv(data, seed=seed))
    return EXIT_OK


# --------------------------------------------------------------------------
# fit

FIT_METHODS = ("bt", "bs", "bu", "fpp", "npp")


def _read(path, role):
    if path is None:
        return None
    if not Path(path).is_file():
        raise UserError(f"dataset not found: {path}")
    return read_dataset(path, role=role)


def _posterior_csv(names, samples, seed, extra=None) -> str:
    buf = io.StringIO()
    buf.write(_header(seed))
    writer = csv.writer(buf, lineterminator="\n")
    cols = list(names) + list(extra or {})
    writer.writerow(cols)
    extra_cols = [np.asarray(v) for v in (extra or {}).values()]
    for i, row in enumerate(samples):
        cells = [format(float(v), ".17g") for v in row]
        cells += [format(float(c[i]), ".17g") for c in extra_cols]
        writer.writerow(cells)
    return buf.getvalue()


def cmd_fit(args) -> int:
    config = _load_config(args.config, "fit")
    method = (_resolve(args, config, "method", str, "") or "").lower()
    if method not in FIT_METHODS:
        raise UserError(f"--method must be one of {', '.join(FIT_METHODS)}")
    example = _resolve(args, config, "example", str, None)
    seed = _resolve(args, config, "seed", int, 1)
    n_particles = _resolve(args, config, "particles", int, 1000)
    grid = _resolve(args, config, "grid", int, 100)
    npp_prior = _resolve(args, config, "npp_prior", _floats, (1.0, 1.0))
    target_path = _resolve(args, config, "target", str, None)
    source_path = _resolve(args, config, "source", str, None)

    need_target = method != "bs"
    need_source = method != "bt"
    if need_target and target_path is None:
        raise UserError(f"method {method} needs --target")
    if need_source and source_path is None:
        raise UserError(f"method {method} needs --source")
    target = _read(target_path, "target") if need_target else None
    source = _read(source_path, "source") if need_source else None
    kind = (target or source).kind
    if example is None:
        example = "linear" if kind == "regression" else "cure"
    model = get_model(example)
    if model.kind != kind:
        raise UserError(f"example {example} expects {model.kind} data, got {kind}")

    out = Path(args.out or f"fit-{method}")
    rng = make_rng(seed)
    cfg = MutationConfig()
    summary = {"method": method, "example": example, "seed": seed, "particles": n_particles}
    extra = None
    if method in ("bt", "bs"):
        fit = fit_posterior(model, target if method == "bt" else source, n_particles, cfg, rng)
        samples = model.constrain(fit.particles)
        summary["log_evidence"] = fit.log_evidence
    else:
        trace = run_tsmc(model, target, source, n_particles, cfg, rng, root_seed=seed)
        _write_trace(trace, out / "trace.npz")
        if method == "bu":
            samples = model.constrain(trace.snapshot(1, trace.n_rungs - 1).particles)
        elif method == "fpp":
            fpp = grid_search_me(trace, grid)
            samples = model.constrain(fpp.posterior.resample(rng.spawn(1)[0]).particles)
            summary["alpha_star"] = fpp.alpha_star
        else:
            npp = sample_npp(trace, n_particles, npp_prior, rng)
            samples = model.constrain(npp.thetas)
            extra = {"alpha": npp.alphas}
            summary["alpha_mean"] = float(np.mean(npp.alphas))
        summary["alpha_ladder"] = [float(a) for a in trace.alpha_ladder]

    summary["posterior_mean"] = dict(zip(model.natural_names, map(float, samples.mean(axis=0))))
    summary["posterior_sd"] = dict(zip(model.natural_names, map(float, samples.std(axis=0, ddof=1))))
    _write_text(out / "posterior.csv", _posterior_csv(model.natural_names, samples, seed, extra))
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_text(out / "config.ini", _effective_config("fit", {
        "method": method, "example": example, "seed": seed, "particles": n_particles, "grid": grid,
        "npp_prior": tuple(npp_prior), "target": target_path, "source": source_path}))

    print(f"{'parameter':>10} {'mean':>12} {'sd':>12}")
    for name in model.natural_names:
        print(f"{name:>10} {summary['posterior_mean'][name]:12.5f} {summary['posterior_sd'][name]:12.5f}")
    if "alpha_star" in summary:
        print(f"alpha_star = {summary['alpha_star']:.6f}")
    if "alpha_mean" in summary:
        print(f"alpha_mean = {summary['alpha_mean']:.6f}")
    return EXIT_OK


def _write_trace(trace, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_trace(trace, path)
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    config = _load_config(args.config, "experiment")
    example = _resolve(args, config, "example", str, None)
    if example not in ("linear", "cure"):
        raise UserError("--example must be linear or cure")
    paper = _resolve(args, config, "paper_scale", _bool, False)
    seed = _resolve(args, config, "seed", int, 1)
    ks = _resolve(args, config, "k", _ints, (0, 1, 2, 3))
    workers = _resolve(args, config, "workers", int, os.cpu_count() or 1)
    if workers < 1:
        raise UserError("--workers must be at least 1")
    overrides = {"root_seed": seed}
    for key, convert in (("replicates", int), ("particles", int), ("n_target", int), ("n_source", int),
                         ("grid", int), ("npp_prior", _floats), ("literal_clppd", _bool),
                         ("fpp_loo", str)):
        value = _resolve(args, config, key, convert, PAPER_SCALE.get(key) if paper else None)
        if value is not None:
            overrides[key] = tuple(value) if isinstance(value, tuple) else value
    try:
        configs = [make_scenario(example, k, **overrides) for k in ks]
    except ContractViolation as exc:
        raise UserError(str(exc)) from None

    out = Path(args.out or f"experiment-{example}")
    started = time.time()
    result = run_experiment(configs, workers=workers)
    if not result.records:
        raise TsmcError("every replicate failed")
    from .evaluation import records_to_csv

    table = aggregate(result.records)
    _write_text(out / "records.csv", records_to_csv(result.records, seed))
    _write_text(out / "aggregate.csv", aggregate_to_csv(table, seed))
    _write_text(out / "summary.json", summary_json(table, configs, result.failures, seed) + "\n")
    effective = {"example": example, "seed": seed, "k": tuple(ks)}
    effective.update({k: v for k, v in overrides.items() if k != "root_seed"})
    effective.update({"replicates": configs[0].replicates, "particles": configs[0].particles})
    _write_text(out / "config.ini", _effective_config("experiment", effective))
    # timing lives in a sidecar so primary outputs stay byte-identical
    _write_text(out / "run-info.json", json.dumps({
        "started": started, "seconds": time.time() - started, "workers": workers,
        "failures": len(result.failures)}, indent=2) + "\n")
    sys.stdout.write(format_table(table))
    if result.failures:
        print(f"{len(result.failures)} replicate cell(s) failed and were excluded", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def format_table(table) -> str:
    cols = table.columns()
    head = ["k", "method"] + cols
    body = [[str(r.k), r.method] + [f"{r.means[c]:.3f}" for c in cols] for r in table.rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in [head] + body]
    return "\n".join(lines) + "\n"


def kde_1d_csv(samples, seed=None, num: int = 512) -> str:
    grid, dens = kde_grid(samples, num)
    buf = io.StringIO()
    buf.write(_header(seed))
    buf.write("x,density\n")
    for x, d in zip(grid, dens):
        buf.write(f"{x:.17g},{d:.17g}\n")
    return buf.getvalue()


def kde_2d_csv(x, y, seed=None, num: int = 64) -> str:
    """Bivariate Gaussian KDE on a ``num`` x ``num`` grid spanning 3 bandwidths past the data."""
    data = np.vstack([x, y])
    kde = gaussian_kde(data)
    sd = np.sqrt(np.diag(kde.covariance))
    gx = np.linspace(x.min() - 3 * sd[0], x.max() + 3 * sd[0], num)
    gy = np.linspace(y.min() - 3 * sd[1], y.max() + 3 * sd[1], num)
    mx, my = np.meshgrid(gx, gy, indexing="ij")
    dens = kde(np.vstack([mx.ravel(), my.ravel()]))
    buf = io.StringIO()
    buf.write(_header(seed))
    buf.write("x,y,density\n")
    for a, b, d in zip(mx.ravel(), my.ravel(), dens):
        buf.write(f"{a:.17g},{b:.17g},{d:.17g}\n")
    return buf.getvalue()


def _read_posterior(path):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except FileNotFoundError:
        raise UserError(f"posterior file not found: {path}") from None
    reader = csv.reader(lines)
    header = next(reader)
    try:
        values = np.array([[float(v) for v in row] for row in reader])
    except ValueError as exc:
        raise UserError(f"{path}: {exc}") from None
    return header, values


def cmd_report(args) -> int:
    try:
        records = read_records(args.records)
    except FileNotFoundError:
        raise UserError(f"records file not found: {args.records}") from None
    if not records:
        raise UserError(f"{args.records}: no records")
    out = Path(args.out or "report")
    names = records[0].param_names
    example = "linear" if tuple(names) == ("beta0", "beta1", "sigma") else "cure"
    table = aggregate(records, TABLE_GROUPS.get(example, {"avg": tuple(names)}))
    text = format_table(table)
    _write_text(out / "table.txt", text)
    sys.stdout.write(text)

    # spread of predictive scores across replicates, per method and k
    for k in sorted({r.k for r in records}):
        for method in METHODS:
            vals = np.array([getattr(r, "loo") for r in records if r.k == k and r.method == method])
            if vals.size >= 2 and np.all(np.isfinite(vals)) and np.ptp(vals) > 0:
                _write_text(out / "kde" / f"loo_k{k}_{method}.csv", kde_1d_csv(vals))

    for spec in args.posterior or []:
        label, _, path = spec.partition("=")
        if not path:
            raise UserError(f"--posterior expects LABEL=PATH, got {spec!r}")
        header, values = _read_posterior(path)
        for j, name in enumerate(header):
            _write_text(out / "kde" / f"{label}_{name}.csv", kde_1d_csv(values[:, j]))
        for a in range(len(header)):
            for b in range(a + 1, len(header)):
                _write_text(out / "kde" / f"{label}_{header[a]}_{header[b]}.csv",
                            kde_2d_csv(values[:, a], values[:, b]))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transfer-smc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"transfer-smc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--workers", type=int)
        p.add_argument("--config")

    p = sub.add_parser("simulate", help="simulate a target or source dataset")
    common(p)
    p.add_argument("--example", choices=sorted(GENERATORS))
    p.add_argument("--k", type=int)
    p.add_argument("--theta", type=_floats, help="natural-scale parameters, comma separated")
    p.add_argument("--role", choices=("target", "source"))
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one method to dataset files")
    common(p)
    p.add_argument("--method", choices=FIT_METHODS)
    p.add_argument("--example", choices=("linear", "cure"))
    p.add_argument("--target")
    p.add_argument("--source")
    p.add_argument("--particles", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--npp-prior", dest="npp_prior", type=_floats)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("experiment", help="run a simulation study")
    common(p)
    p.add_argument("--example", choices=("linear", "cure"))
    p.add_argument("--k", type=_ints, help="shift levels, e.g. 0,1,2,3")
    p.add_argument("--replicates", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--n-target", dest="n_target", type=int)
    p.add_argument("--n-source", dest="n_source", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--npp-prior", dest="npp_prior", type=_floats)
    p.add_argument("--literal-clppd", dest="literal_clppd", action="store_true", default=None)
    p.add_argument("--fpp-loo", dest="fpp_loo", choices=("reselect", "fixed"),
                   help="re-select alpha without each held-out point (default) or keep alpha* fixed")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="tabulate records and write KDE grid data")
    common(p)
    p.add_argument("records")
    p.add_argument("--posterior", action="append", help="LABEL=PATH of a posterior CSV from fit")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except TsmcError as exc:
        print(f"sampler aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
