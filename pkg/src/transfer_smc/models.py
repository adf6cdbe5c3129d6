"""Models, datasets and data-generating processes.

A :class:`ModelSpec` bundles a proper prior on an unconstrained parameter
vector, a vectorised pointwise log-likelihood and the map back to natural
parameters. Two models are shipped for the simulation studies (Gaussian
linear regression and the Weibull cure model) plus two conjugate Gaussian
models that have closed-form evidences and are used as oracles.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import __version__
from .stats import ContractViolation

LOG_2PI = float(np.log(2.0 * np.pi))
CENSOR_TIME = 5.5

COLUMNS = {
    "regression": ("y", "x"),
    "survival": ("y", "nu", "x1", "x2", "x3"),
}


class InvalidObservationError(ContractViolation):
    pass


# --------------------------------------------------------------------------
# observations and datasets


@dataclass(frozen=True)
class RegressionObservation:
    y: float
    x: float


@dataclass(frozen=True)
class SurvivalObservation:
    y: float
    nu: int
    x1: int
    x2: int
    x3: float


_RECORD_TYPES = {"regression": RegressionObservation, "survival": SurvivalObservation}


@dataclass(frozen=True)
class Dataset:
    """Column-oriented observations of one kind, tagged target or source."""

    kind: str
    role: str
    columns: dict = field(repr=False)

    def __post_init__(self):
        if self.kind not in COLUMNS:
            raise ContractViolation(f"unknown dataset kind {self.kind!r}")
        if self.role not in ("target", "source"):
            raise ContractViolation(f"role must be target or source, got {self.role!r}")
        cols = {name: np.asarray(self.columns[name], dtype=float) for name in COLUMNS[self.kind]}
        sizes = {c.shape for c in cols.values()}
        if len(sizes) != 1 or cols["y"].ndim != 1:
            raise ContractViolation("dataset columns must be equal-length vectors")
        if cols["y"].size == 0:
            raise ContractViolation("dataset must be non-empty")
        object.__setattr__(self, "columns", cols)

    def __len__(self) -> int:
        return self.columns["y"].size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def records(self) -> Iterator:
        cls = _RECORD_TYPES[self.kind]
        names = COLUMNS[self.kind]
        for row in zip(*(self.columns[n] for n in names)):
            if self.kind == "survival":
                y, nu, x1, x2, x3 = row
                yield cls(y, int(nu), int(x1), int(x2), x3)
            else:
                yield cls(*row)

    @classmethod
    def from_records(cls, records, role: str) -> "Dataset":
        records = list(records)
        if not records:
            raise ContractViolation("dataset must be non-empty")
        kind = "survival" if isinstance(records[0], SurvivalObservation) else "regression"
        cols = {n: [getattr(r, n) for r in records] for n in COLUMNS[kind]}
        return cls(kind, role, cols)

    def subset(self, index) -> "Dataset":
        return Dataset(self.kind, self.role, {k: v[index] for k, v in self.columns.items()})

    def without(self, i: int) -> "Dataset":
        keep = np.ones(len(self), dtype=bool)
        keep[i] = False
        return self.subset(keep)

    def concat(self, other: "Dataset", role: str | None = None) -> "Dataset":
        if other.kind != self.kind:
            raise ContractViolation("cannot concatenate datasets of different kinds")
        cols = {k: np.concatenate([v, other.columns[k]]) for k, v in self.columns.items()}
        return Dataset(self.kind, role or self.role, cols)

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.kind, role, self.columns)


def write_dataset(dataset: Dataset, path, seed: int | None = None) -> None:
    """Write a dataset as CSV; floats carry 17 significant digits."""
    Path(path).write_text(dataset_to_csv(dataset, seed))


def dataset_to_csv(dataset: Dataset, seed: int | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# transfer-smc {__version__} seed={seed} kind={dataset.kind} role={dataset.role}\n")
    names = COLUMNS[dataset.kind]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in zip(*(dataset.columns[n] for n in names)):
        writer.writerow([format(v, ".17g") for v in row])
    return buf.getvalue()


def read_dataset(path, role: str | None = None) -> Dataset:
    """Read a dataset CSV written by :func:`write_dataset`."""
    meta = {}
    rows = []
    header = None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        k, v = token.split("=", 1)
                        meta[k] = v
                continue
            if not line.strip():
                continue
            cells = next(csv.reader([line]))
            if header is None:
                header = tuple(c.strip() for c in cells)
                continue
            rows.append([float(c) for c in cells])
    kind = next((k for k, cols in COLUMNS.items() if cols == header), None)
    if kind is None:
        raise ContractViolation(f"{path}: unrecognised header {header}")
    if not rows:
        raise ContractViolation(f"{path}: no observations")
    data = np.array(rows, dtype=float)
    cols = {n: data[:, j] for j, n in enumerate(header)}
    return Dataset(kind, role or meta.get("role", "target"), cols)


# --------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    """A prior, a pointwise likelihood and a constraint map.

    ``log_prior`` and ``pointwise_log_lik`` are vectorised over particle
    rows: ``theta`` has shape ``(N, d)`` (a single vector is promoted).
    ``pointwise_log_lik(data, theta)`` returns an ``(N, n)`` matrix.
    """

    name: str
    dimension: int
    param_names: tuple
    kind: str
    log_prior: Callable
    sample_prior: Callable
    pointwise_log_lik: Callable
    constrain: Callable
    unconstrain: Callable
    natural_names: tuple = ()

    def log_lik(self, data: Dataset | None, theta) -> np.ndarray:
        """Total log-likelihood per particle; zero for ``data=None``."""
        theta = np.atleast_2d(theta)
        if data is None:
            return np.zeros(theta.shape[0])
        return self.pointwise_log_lik(data, theta).sum(axis=1)

    def log_lik_record(self, record, theta) -> np.ndarray:
        return self.pointwise_log_lik(Dataset.from_records([record], "target"), theta)[:, 0]


def _normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


class _GaussianPrior:
    """Independent normal prior on the unconstrained coordinates."""

    def __init__(self, mean, sd):
        self.mean = np.asarray(mean, dtype=float)
        self.sd = np.asarray(sd, dtype=float)

    def log_prior(self, theta):
        theta = np.atleast_2d(theta)
        return _normal_logpdf(theta, self.mean, self.sd).sum(axis=1)

    def sample(self, rng, size=None):
        n = 1 if size is None else size
        draws = self.mean + self.sd * rng.standard_normal((n, self.mean.size))
        return draws[0] if size is None else draws


def _identity(theta):
    return np.array(theta, dtype=float)


def linear_model(beta_sd: float = 10.0, log_sigma_sd: float = 1.5) -> ModelSpec:
    """Gaussian linear regression ``y = b0 + b1 x + N(0, sigma^2)``.

    Unconstrained parameters are ``(b0, b1, log sigma)``.
    """
    prior = _GaussianPrior([0.0, 0.0, 0.0], [beta_sd, beta_sd, log_sigma_sd])

    def pointwise(data: Dataset, theta):
        theta = np.atleast_2d(theta)
        b0, b1, log_sigma = theta[:, 0:1], theta[:, 1:2], theta[:, 2:3]
        resid = (data["y"] - b0 - b1 * data["x"]) * np.exp(-log_sigma)
        return -0.5 * resid * resid - log_sigma - 0.5 * LOG_2PI

    def constrain(theta):
        out = np.array(theta, dtype=float)
        out[..., 2] = np.exp(out[..., 2])
        return out

    def unconstrain(natural):
        out = np.array(natural, dtype=float)
        if np.any(out[..., 2] <= 0):
            raise ContractViolation("sigma must be positive")
        out[..., 2] = np.log(out[..., 2])
        return out

    return ModelSpec(
        name="linear",
        dimension=3,
        param_names=("beta0", "beta1", "log_sigma"),
        natural_names=("beta0", "beta1", "sigma"),
        kind="regression",
        log_prior=prior.log_prior,
        sample_prior=prior.sample,
        pointwise_log_lik=pointwise,
        constrain=constrain,
        unconstrain=unconstrain,
    )


def cure_design(data: Dataset) -> np.ndarray:
    """Design rows ``(1, x1, x2, x3, x2*x3)``."""
    x2, x3 = data["x2"], data["x3"]
    return np.column_stack([np.ones(len(data)), data["x1"], x2, x3, x2 * x3])


def weibull_cure_model(beta_sd: float = 10.0, log_k_sd: float = 1.0, lam_sd: float = 10.0) -> ModelSpec:
    """Weibull promotion-time cure model.

    Parameters are ``(b0..b4, log k, lam)``. With ``eta = X beta``, a
    pointwise term is ``nu*(eta + log f(y)) - exp(eta)*F(y)`` where
    ``f(y) = k y^(k-1) exp(lam - y^k e^lam)`` and
    ``F(y) = 1 - exp(-y^k e^lam)``.
    """
    prior = _GaussianPrior(np.zeros(7), [beta_sd] * 5 + [log_k_sd, lam_sd])
    cache: dict = {}

    def columns(data: Dataset):
        key = id(data)
        hit = cache.get(key)
        if hit is not None and hit[0] is data:
            return hit[1]
        y = data["y"]
        if np.any(y <= 0):
            raise InvalidObservationError("survival times must be positive")
        cols = (cure_design(data).T, np.log(y), data["nu"])
        if len(cache) > 64:
            cache.clear()
        cache[key] = (data, cols)
        return cols

    def pointwise(data: Dataset, theta):
        theta = np.atleast_2d(theta)
        design_t, log_y, nu = columns(data)
        eta = theta[:, :5] @ design_t
        log_k = theta[:, 5:6]
        lam = theta[:, 6:7]
        k = np.exp(log_k)
        klog_y = k * log_y
        klog_y += lam
        # cumulative hazard y^k e^lam
        hazard = np.exp(klog_y)
        # event term nu * (eta + log f(y)); log f = log k - log y + log H - H
        event = klog_y
        event += log_k
        event -= log_y
        event -= hazard
        event += eta
        event *= nu
        np.negative(hazard, out=hazard)
        big_f = np.expm1(hazard, out=hazard)
        np.exp(eta, out=eta)
        eta *= big_f
        event += eta
        bad = np.isnan(event)
        if bad.any():
            # 0 * inf from censored rows under an overflowing hazard
            event[bad] = -np.inf
        return event

    def constrain(theta):
        out = np.array(theta, dtype=float)
        out[..., 5] = np.exp(out[..., 5])
        return out

    def unconstrain(natural):
        out = np.array(natural, dtype=float)
        if np.any(out[..., 5] <= 0):
            raise ContractViolation("Weibull shape must be positive")
        out[..., 5] = np.log(out[..., 5])
        return out

    return ModelSpec(
        name="cure",
        dimension=7,
        param_names=("beta0", "beta1", "beta2", "beta3", "beta4", "log_k", "lam"),
        natural_names=("beta0", "beta1", "beta2", "beta3", "beta4", "k", "lam"),
        kind="survival",
        log_prior=prior.log_prior,
        sample_prior=prior.sample,
        pointwise_log_lik=pointwise,
        constrain=constrain,
        unconstrain=unconstrain,
    )


def gaussian_location_model(sigma: float = 1.0, prior_mean: float = 0.0, prior_sd: float = 1.0) -> ModelSpec:
    """``y ~ N(mu, sigma^2)`` with known ``sigma`` and a normal prior on ``mu``.

    Works on regression datasets; the covariate column is ignored.
    """
    prior = _GaussianPrior([prior_mean], [prior_sd])

    def pointwise(data: Dataset, theta):
        theta = np.atleast_2d(theta)
        return _normal_logpdf(data["y"], theta[:, 0:1], sigma)

    return ModelSpec(
        name="gaussian-location",
        dimension=1,
        param_names=("mu",),
        natural_names=("mu",),
        kind="regression",
        log_prior=prior.log_prior,
        sample_prior=prior.sample,
        pointwise_log_lik=pointwise,
        constrain=_identity,
        unconstrain=_identity,
    )


def linear_known_sigma_model(sigma: float = 1.0, beta_sd: float = 10.0) -> ModelSpec:
    """Linear regression with known noise ``sigma`` and ``N(0, beta_sd^2)`` coefficients."""
    prior = _GaussianPrior([0.0, 0.0], [beta_sd, beta_sd])

    def pointwise(data: Dataset, theta):
        theta = np.atleast_2d(theta)
        mean = theta[:, 0:1] + theta[:, 1:2] * data["x"]
        return _normal_logpdf(data["y"], mean, sigma)

    return ModelSpec(
        name="linear-known-sigma",
        dimension=2,
        param_names=("beta0", "beta1"),
        natural_names=("beta0", "beta1"),
        kind="regression",
        log_prior=prior.log_prior,
        sample_prior=prior.sample,
        pointwise_log_lik=pointwise,
        constrain=_identity,
        unconstrain=_identity,
    )


MODELS = {"linear": linear_model, "cure": weibull_cure_model}


def get_model(example: str) -> ModelSpec:
    try:
        return MODELS[example]()
    except KeyError:
        raise ContractViolation(f"unknown example {example!r}") from None


# --------------------------------------------------------------------------
# data-generating processes

TREATMENT_RATE = 0.511
SEX_RATE = 0.397
AGE_SD = 0.6


def generate_linear(n: int, theta, rng: np.random.Generator, role: str = "target") -> Dataset:
    """``n`` draws with ``x ~ N(0, 1)`` and ``y = b0 + b1 x + N(0, sigma^2)``.

    ``theta`` is on the natural scale ``(b0, b1, sigma)``.
    """
    b0, b1, sigma = (float(v) for v in theta)
    if n < 1 or not sigma > 0:
        raise ContractViolation("need n >= 1 and sigma > 0")
    x = rng.standard_normal(n)
    y = b0 + b1 * x + sigma * rng.standard_normal(n)
    return Dataset("regression", role, {"y": y, "x": x})


def weibull_inverse_cdf(u, k: float, lam: float):
    """Invert ``F(y) = 1 - exp(-y^k e^lam)`` at ``1 - u``; ``u ~ U(0,1)`` gives a Weibull draw."""
    return (-np.log(u) * np.exp(-lam)) ** (1.0 / k)


def generate_cure(n: int, theta, rng: np.random.Generator, role: str = "target") -> Dataset:
    """Simulate the cure process with covariates matched to the E1690 summaries.

    For each subject: ``x1 ~ Ber(0.511)``, ``x2 ~ Ber(0.397)``,
    ``x3 = s / 0.6`` with ``s ~ N(0, 0.6^2)``, latent count
    ``C ~ Poisson(exp(X beta))``; the event time is the minimum of ``C``
    Weibull draws, right-censored at 5.5. ``C = 0`` (cured) is recorded as
    ``y = 5.5, nu = 0``. ``theta`` is natural-scale ``(b0..b4, k, lam)``.
    """
    theta = np.asarray(theta, dtype=float)
    beta, k, lam = theta[:5], float(theta[5]), float(theta[6])
    if n < 1 or not k > 0:
        raise ContractViolation("need n >= 1 and k > 0")
    x1 = (rng.random(n) < TREATMENT_RATE).astype(float)
    x2 = (rng.random(n) < SEX_RATE).astype(float)
    x3 = rng.normal(0.0, AGE_SD, n) / AGE_SD
    design = np.column_stack([np.ones(n), x1, x2, x3, x2 * x3])
    rate = np.exp(design @ beta)
    if not np.all(rate < 1e12):
        raise ContractViolation("Poisson rate exp(X beta) too large to simulate")
    counts = rng.poisson(rate)
    y = np.full(n, CENSOR_TIME)
    nu = np.zeros(n)
    for i in np.flatnonzero(counts):
        t = weibull_inverse_cdf(rng.random(counts[i]), k, lam).min()
        if t <= CENSOR_TIME:
            y[i], nu[i] = t, 1.0
    return Dataset("survival", role, {"y": y, "nu": nu, "x1": x1, "x2": x2, "x3": x3})


GENERATORS = {"linear": generate_linear, "cure": generate_cure}

