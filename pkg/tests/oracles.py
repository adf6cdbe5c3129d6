"""Closed-form references for the conjugate Gaussian models.

Independent of the samplers: plain linear algebra on the Gaussian
integral ``log int prod_i N(y_i | x_i'b, s^2)^w_i N(b | m0, S0) db``.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate, stats


def tempered_log_evidence(y, design, weights, sigma, prior_mean, prior_cov):
    y = np.asarray(y, float)
    X = np.atleast_2d(np.asarray(design, float))
    if X.shape[0] != y.size:
        X = X.T
    w = np.asarray(weights, float) * np.ones(y.size)
    m0 = np.atleast_1d(np.asarray(prior_mean, float))
    S0 = np.atleast_2d(np.asarray(prior_cov, float))
    S0inv = np.linalg.inv(S0)
    s2 = sigma**2
    A = S0inv + (X.T * w) @ X / s2
    b = S0inv @ m0 + (X.T * w) @ y / s2
    _, logdet_a = np.linalg.slogdet(A)
    _, logdet_s0 = np.linalg.slogdet(S0)
    return float(
        -0.5 * w.sum() * np.log(2 * np.pi * s2)
        - 0.5 * np.sum(w * y * y) / s2
        - 0.5 * m0 @ S0inv @ m0
        + 0.5 * b @ np.linalg.solve(A, b)
        - 0.5 * logdet_a
        - 0.5 * logdet_s0
    )


def location_log_c(y_target, y_source, alpha, sigma, prior_mean, prior_sd, target_weight=1.0):
    """``log C_TS(alpha)`` (``target_weight=1``) or ``log C_S(alpha)`` (``0``)."""
    y = np.concatenate([np.asarray(y_target, float), np.asarray(y_source, float)])
    w = np.concatenate([np.full(len(y_target), target_weight), np.full(len(y_source), alpha)])
    return tempered_log_evidence(y, np.ones((y.size, 1)), w, sigma, [prior_mean], [[prior_sd**2]])


def location_log_c_target(y_target, y_source, alpha, sigma, prior_mean, prior_sd):
    return location_log_c(y_target, y_source, alpha, sigma, prior_mean, prior_sd) - location_log_c(
        y_target, y_source, alpha, sigma, prior_mean, prior_sd, target_weight=0.0
    )


def linear_log_evidence(y, x, sigma, beta_sd):
    design = np.column_stack([np.ones(len(y)), x])
    return tempered_log_evidence(y, design, 1.0, sigma, [0.0, 0.0], np.eye(2) * beta_sd**2)


def linear_log_evidence_mvn(y, x, sigma, beta_sd):
    """Same quantity through the marginal ``y ~ N(0, s^2 I + X S0 X')``."""
    design = np.column_stack([np.ones(len(y)), x])
    cov = sigma**2 * np.eye(len(y)) + beta_sd**2 * design @ design.T
    return float(stats.multivariate_normal(np.zeros(len(y)), cov).logpdf(y))


def location_log_c_quad(y_target, y_source, alpha, sigma, prior_mean, prior_sd, target_weight=1.0):
    """Quadrature version of :func:`location_log_c`, used to check the oracle."""
    yt = np.asarray(y_target, float)
    ys = np.asarray(y_source, float)
    centre = prior_mean
    ref = location_log_c(yt, ys, alpha, sigma, prior_mean, prior_sd, target_weight)

    def integrand(mu):
        ll = target_weight * stats.norm.logpdf(yt, mu, sigma).sum() + alpha * stats.norm.logpdf(ys, mu, sigma).sum()
        return np.exp(ll + stats.norm.logpdf(mu, prior_mean, prior_sd) - ref)

    val, _ = integrate.quad(integrand, centre - 12 * prior_sd, centre + 12 * prior_sd, limit=500, points=[np.mean(np.r_[yt, ys])])
    return ref + np.log(val)


def location_alpha_posterior(y_target, y_source, sigma, prior_mean, prior_sd, a=1.0, b=1.0, grid=4001):
    """Density of ``alpha`` proportional to ``C_T(alpha) Beta(alpha|a,b)`` on a grid, normalised by quadrature."""
    alphas = np.linspace(0.0, 1.0, grid)
    log_ct = np.array([location_log_c_target(y_target, y_source, al, sigma, prior_mean, prior_sd) for al in alphas])
    with np.errstate(divide="ignore"):
        log_p = log_ct + stats.beta(a, b).logpdf(alphas)
    dens = np.exp(log_p - np.max(log_p[np.isfinite(log_p)]))
    dens /= integrate.trapezoid(dens, alphas)
    return alphas, dens


def location_posterior(y_target, y_source, alpha, sigma, prior_mean, prior_sd):
    """Mean and variance of ``mu`` under the power-prior posterior."""
    prec = 1 / prior_sd**2 + (len(y_target) + alpha * len(y_source)) / sigma**2
    num = prior_mean / prior_sd**2 + (np.sum(y_target) + alpha * np.sum(y_source)) / sigma**2
    return num / prec, 1 / prec


def location_log_predictive(y_new, y_target, y_source, alpha, sigma, prior_mean, prior_sd):
    m, v = location_posterior(y_target, y_source, alpha, sigma, prior_mean, prior_sd)
    return stats.norm.logpdf(y_new, m, np.sqrt(v + sigma**2))


def location_npp_loo(y_target, y_source, sigma, prior_mean, prior_sd, a=1.0, b=1.0, grid=2001):
    """Exact NPP leave-one-out sum: each held-out predictive integrates over ``alpha | y_{-i}``."""
    yt = np.asarray(y_target, float)
    total = 0.0
    for i in range(yt.size):
        rest = np.delete(yt, i)
        alphas, dens = location_alpha_posterior(rest, y_source, sigma, prior_mean, prior_sd, a, b, grid)
        pred = np.exp([location_log_predictive(yt[i], rest, y_source, al, sigma, prior_mean, prior_sd) for al in alphas])
        total += np.log(integrate.trapezoid(dens * pred, alphas))
    return float(total)


def location_fpp_loo(y_target, y_source, sigma, prior_mean, prior_sd, points=100, reselect=True):
    """Exact FPP leave-one-out sum; ``alpha`` maximises ``C_T`` on ``{0, 1/P, ..., 1}``.

    With ``reselect`` the maximiser is recomputed from ``y_{-i}`` for each
    held-out point; otherwise the full-data maximiser is used throughout.
    Returns the sum and the per-point ``alpha`` values.
    """
    yt = np.asarray(y_target, float)
    grid = np.arange(points + 1) / points

    def best(y):
        vals = np.array([location_log_c_target(y, y_source, a, sigma, prior_mean, prior_sd) for a in grid])
        return grid[int(np.flatnonzero(np.isclose(vals, vals.max(), rtol=1e-12, atol=1e-10))[0])]

    star = best(yt)
    total, alphas = 0.0, []
    for i in range(yt.size):
        rest = np.delete(yt, i)
        a = best(rest) if reselect else star
        alphas.append(a)
        total += float(location_log_predictive(yt[i], rest, y_source, a, sigma, prior_mean, prior_sd))
    return total, np.array(alphas)
