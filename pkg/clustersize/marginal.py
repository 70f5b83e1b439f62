"""Module for marginal likelihoods with the random effects integrated out.

Gaussian LMMs are integrated in closed form, one block-structured covariance
per specimen. Count models use adaptive Gauss-Hermite quadrature over the
specimen effect, centred at the conditional mode and scaled by the curvature
there. The joint model integrates the field effects analytically and then
uses a two-dimensional adaptive product rule over (a^A, a^N).
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import gammaln, logsumexp, roots_hermite, xlogy

from clustersize.constraint import Constraint, Family
from clustersize.dataset import DataArrays, Dataset
from clustersize.errors import ModelSpecError, NumericalError
from clustersize.model import (
    LOG_2PI,
    field_fixed_predictor,
    field_variance_multiplier,
    shifted_negbin_logpmf,
)
from clustersize.params import ModelSpec, ParamVector

logger = logging.getLogger(__name__)

DEFAULT_NODES = 20
NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-11
MAX_NEWTON_STEP = 3.0


def marginal_loglik(spec: ModelSpec, theta: ParamVector, d: Dataset, n_nodes: int = DEFAULT_NODES) -> float:
    """Log-likelihood of ``d`` with all random effects integrated out.

    :param spec: Model specification.
    :param theta: Parameters in the support of ``spec``.
    :param d: Dataset.
    :param n_nodes: Gauss-Hermite nodes per latent dimension.
    :raises NumericalError: if a specimen integral is not finite.
    """
    return math.fsum(marginal_terms(spec, theta, d.arrays, n_nodes))


def marginal_terms(spec: ModelSpec, theta: ParamVector, arr: DataArrays, n_nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Per-specimen marginal log-likelihood contributions."""
    fam = spec.family
    if fam.is_gaussian:
        terms = _gaussian_terms(spec, theta, arr)
    elif fam.is_count:
        terms = _count_terms(spec, theta, arr, n_nodes)
    else:
        terms = _joint_terms(spec, theta, arr, n_nodes)
    bad = ~np.isfinite(terms)
    if np.any(bad):
        msg = (
            f"{fam.value}: non-finite marginal likelihood for specimen(s) "
            f"{[arr.specimen_ids[i] for i in np.flatnonzero(bad)[:5]]} at theta={theta.to_dict()}"
        )
        raise NumericalError(msg)
    return terms


def _field_sums(resid: np.ndarray, arr: DataArrays) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = np.bincount(arr.vessel_field, minlength=arr.n_fields).astype(float)
    s = np.bincount(arr.vessel_field, weights=resid, minlength=arr.n_fields)
    q = np.bincount(arr.vessel_field, weights=resid * resid, minlength=arr.n_fields)
    return n, s, q


def _gaussian_terms(spec: ModelSpec, theta: ParamVector, arr: DataArrays) -> np.ndarray:
    sigma2 = theta.scalar("sigma2")
    tau2 = theta.scalar("tau2")
    if not (sigma2 > 0.0 and tau2 >= 0.0):
        msg = f"need sigma2 > 0 and tau2 >= 0, got {sigma2} and {tau2}"
        raise ModelSpecError(msg)
    eta = field_fixed_predictor(spec, theta, arr)
    if spec.family is Family.PLA_LMM:
        resid = arr.pla - eta
        n, s, q = np.ones(arr.n_fields), resid, resid * resid
        c = np.zeros(arr.n_fields)
    else:
        y = getattr(arr, spec.family.vessel_outcome)
        n, s, q = _field_sums(y - eta[arr.vessel_field], arr)
        c = theta.scalar("nu2") * field_variance_multiplier(spec, theta, arr)
    big_d = sigma2 + n * c
    logdet_f = (n - 1.0) * math.log(sigma2) + np.log(big_d)
    quad_f = (q - c * s * s / big_d) / sigma2
    m = arr.n_specimens
    idx = arr.field_specimen
    u = np.bincount(idx, weights=n / big_d, minlength=m)
    w = np.bincount(idx, weights=s / big_d, minlength=m)
    n_obs = np.bincount(idx, weights=n, minlength=m)
    logdet = np.bincount(idx, weights=logdet_f, minlength=m) + np.log1p(tau2 * u)
    quad = np.bincount(idx, weights=quad_f, minlength=m) - tau2 * w * w / (1.0 + tau2 * u)
    return -0.5 * (n_obs * LOG_2PI + logdet + quad)


def _count_derivatives(
    y: np.ndarray, mu: np.ndarray, dispersion: float | None
) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of the count log-pmf in the log-mean."""
    if dispersion is None:
        return y - mu, -mu
    ratio = mu / (dispersion + mu)
    return y - (y + dispersion) * ratio, -(y + dispersion) * dispersion * mu / (dispersion + mu) ** 2


def _count_logpmf(n: np.ndarray, mu: np.ndarray, dispersion: float | None) -> np.ndarray:
    if dispersion is None:
        k = n - 1.0
        return xlogy(k, mu) - mu - gammaln(k + 1.0)
    return shifted_negbin_logpmf(n, mu, dispersion)


def _hermite(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = roots_hermite(n_nodes)
    return nodes, np.log(weights) + nodes * nodes


def _count_terms(spec: ModelSpec, theta: ParamVector, arr: DataArrays, n_nodes: int) -> np.ndarray:
    tau2 = theta.scalar("tau2")
    if not tau2 > 0.0:
        msg = f"tau2 must be positive, got {tau2}"
        raise ModelSpecError(msg)
    dispersion = theta.scalar("dispersion") if spec.family is Family.LVD_NEGBIN else None
    eta = field_fixed_predictor(spec, theta, arr)
    y = arr.lvd - 1.0
    idx = arr.field_specimen
    m = arr.n_specimens
    starts = arr.specimen_field_starts()

    mode = np.zeros(m)
    curv = np.full(m, 1.0 / tau2)
    converged = False
    for _ in range(NEWTON_MAX_ITER):
        mu = np.exp(eta + mode[idx])
        d1, d2 = _count_derivatives(y, mu, dispersion)
        grad = np.bincount(idx, weights=d1, minlength=m) - mode / tau2
        curv = -np.bincount(idx, weights=d2, minlength=m) + 1.0 / tau2
        step = np.clip(grad / curv, -MAX_NEWTON_STEP, MAX_NEWTON_STEP)
        mode = mode + step
        if not np.all(np.isfinite(mode)):
            break
        if np.max(np.abs(step)) < NEWTON_TOL:
            converged = True
            break
    if converged:
        mu = np.exp(eta + mode[idx])
        _, d2 = _count_derivatives(y, mu, dispersion)
        curv = -np.bincount(idx, weights=d2, minlength=m) + 1.0 / tau2
        scale = 1.0 / np.sqrt(curv)
        nodes, log_w = _hermite(n_nodes)
    else:
        logger.debug("count quadrature: mode search failed, using a wide non-adaptive grid")
        mode = np.zeros(m)
        scale = np.full(m, math.sqrt(tau2))
        nodes, log_w = _hermite(2 * n_nodes)

    points = mode[:, None] + math.sqrt(2.0) * scale[:, None] * nodes[None, :]
    field_ll = _count_logpmf(arr.lvd[:, None].astype(float), np.exp(eta[:, None] + points[idx]), dispersion)
    h = np.add.reduceat(field_ll, starts, axis=0) - 0.5 * (math.log(2.0 * math.pi * tau2) + points**2 / tau2)
    return np.log(math.sqrt(2.0) * scale) + logsumexp(log_w[None, :] + h, axis=1)


def _joint_terms(spec: ModelSpec, theta: ParamVector, arr: DataArrays, n_nodes: int) -> np.ndarray:
    sigma2 = theta.scalar("sigma2")
    nu2 = theta.scalar("nu2")
    if not (sigma2 > 0.0 and nu2 > 0.0):
        msg = f"need sigma2 > 0 and nu2 > 0, got {sigma2} and {nu2}"
        raise ModelSpecError(msg)
    rho = 0.0 if spec.has(Constraint.RHO_ZERO) else theta.scalar("rho")
    if not -1.0 < rho < 1.0:
        msg = f"rho must lie in (-1, 1), got {rho}"
        raise ModelSpecError(msg)
    lam_a = theta.scalar("lambda_a")
    lam_n = theta.scalar("lambda_n")
    m = arr.n_specimens
    idx = arr.field_specimen
    starts = arr.specimen_field_starts()

    # Vessel part: with b integrated out it is an exact quadratic in a^A per specimen.
    eta_a = field_fixed_predictor(spec, theta, arr, "a")
    n, s0, q0 = _field_sums(arr.log_area - eta_a[arr.vessel_field], arr)
    big_d = sigma2 + n * nu2
    coef_a = np.bincount(idx, weights=(q0 - nu2 * s0 * s0 / big_d) / sigma2, minlength=m)
    coef_b = np.bincount(idx, weights=-2.0 * lam_a * s0 / big_d, minlength=m)
    coef_c = np.bincount(idx, weights=n * lam_a * lam_a / big_d, minlength=m)
    const = np.bincount(
        idx, weights=-0.5 * (n * LOG_2PI + (n - 1.0) * math.log(sigma2) + np.log(big_d)), minlength=m
    )

    eta_n = field_fixed_predictor(spec, theta, arr, "n")
    y = arr.lvd - 1.0
    one_minus = 1.0 - rho * rho
    prec = np.array([[1.0, -rho], [-rho, 1.0]]) / one_minus

    mode = np.zeros((m, 2))
    converged = False
    hess = None
    for _ in range(NEWTON_MAX_ITER):
        mu = np.exp(eta_n + lam_n * mode[idx, 1])
        g_n = lam_n * np.bincount(idx, weights=y - mu, minlength=m)
        h_n = lam_n * lam_n * np.bincount(idx, weights=mu, minlength=m)
        grad = np.stack([-0.5 * (coef_b + 2.0 * coef_c * mode[:, 0]), g_n], axis=1) - mode @ prec
        hess = np.zeros((m, 2, 2))
        hess[:, 0, 0] = coef_c
        hess[:, 1, 1] = h_n
        hess += prec
        step = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        step = np.clip(step, -MAX_NEWTON_STEP, MAX_NEWTON_STEP)
        mode = mode + step
        if not np.all(np.isfinite(mode)):
            break
        if np.max(np.abs(step)) < NEWTON_TOL:
            converged = True
            break

    nodes, log_w = _hermite(n_nodes if converged else 2 * n_nodes)
    grid_x = np.repeat(nodes, nodes.size)
    grid_y = np.tile(nodes, nodes.size)
    log_w2 = np.repeat(log_w, nodes.size) + np.tile(log_w, nodes.size)
    if converged:
        mu = np.exp(eta_n + lam_n * mode[idx, 1])
        hess = np.zeros((m, 2, 2))
        hess[:, 0, 0] = coef_c
        hess[:, 1, 1] = lam_n * lam_n * np.bincount(idx, weights=mu, minlength=m)
        hess += prec
        chol = np.linalg.cholesky(np.linalg.inv(hess))
    else:
        logger.debug("joint quadrature: mode search failed, using a wide non-adaptive grid")
        mode = np.zeros((m, 2))
        chol = np.broadcast_to(np.linalg.cholesky(np.linalg.inv(prec)), (m, 2, 2)).copy()
    log_det_l = np.log(chol[:, 0, 0]) + np.log(chol[:, 1, 1])

    root2 = math.sqrt(2.0)
    a_area = mode[:, :1] + root2 * (chol[:, 0, :1] * grid_x[None, :] + chol[:, 0, 1:] * grid_y[None, :])
    a_count = mode[:, 1:] + root2 * (chol[:, 1, :1] * grid_x[None, :] + chol[:, 1, 1:] * grid_y[None, :])

    h = const[:, None] - 0.5 * (coef_a[:, None] + coef_b[:, None] * a_area + coef_c[:, None] * a_area**2)
    mu = np.exp(eta_n[:, None] + lam_n * a_count[idx])
    h += np.add.reduceat(_count_logpmf(arr.lvd[:, None].astype(float), mu, None), starts, axis=0)
    h += -LOG_2PI - 0.5 * math.log(one_minus) - 0.5 * (
        a_area**2 - 2.0 * rho * a_area * a_count + a_count**2
    ) / one_minus
    return math.log(2.0) + log_det_l + logsumexp(log_w2[None, :] + h, axis=1)
