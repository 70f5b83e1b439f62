"""Module for maximum-likelihood fitting, likelihood-ratio tests and ML-based comparisons.

The marginal log-likelihood of :mod:`clustersize.marginal` is maximised by
BFGS on the unconstrained reparameterisation of the model (log variances,
scaled-logit loadings and ρ). Gradients are central differences of the
objective; standard errors come from the observed information and are mapped
to the natural scale by the delta method.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.stats import chi2, norm

from clustersize.constraint import Constraint, Family
from clustersize.dataset import DataArrays, Dataset
from clustersize.errors import BoundaryWarning, ConvergenceWarning, ModelSpecError, NumericalError
from clustersize.marginal import DEFAULT_NODES, marginal_terms
from clustersize.model import field_fixed_predictor, field_variance_multiplier, initial_params, orient_signs
from clustersize.params import DEFAULT_PRIORS, Layout, ModelSpec, ParamVector, PriorSpec
from clustersize.tissue import Grouping, TissueType

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MLOptions:
    """Settings of :func:`fit_ml`.

    :param max_iter: BFGS iteration cap.
    :param gtol: Tolerance on the sup-norm of the gradient of -ℓ/max(1, |ℓ(init)|).
    :param fd_step: Central-difference step on the unconstrained scale.
    :param hessian_step: Step for differencing the gradient into the observed information.
    :param n_nodes: Gauss-Hermite nodes per latent dimension.
    :param compute_se: Whether to compute standard errors and Wald intervals.
    :param priors: Only the λ and ρ bounds are used, to define the parameter space.
    """

    max_iter: int = 500
    gtol: float = 1e-6
    fd_step: float = 1e-5
    hessian_step: float = 1e-4
    n_nodes: int = DEFAULT_NODES
    compute_se: bool = True
    priors: PriorSpec = DEFAULT_PRIORS

    def __post_init__(self) -> None:
        if self.max_iter < 0:
            msg = f"max_iter must be nonnegative, got {self.max_iter}"
            raise ValueError(msg)
        for name in ("gtol", "fd_step", "hessian_step"):
            if not getattr(self, name) > 0.0:
                msg = f"{name} must be positive, got {getattr(self, name)}"
                raise ValueError(msg)
        if self.n_nodes < 1:
            msg = f"n_nodes must be at least 1, got {self.n_nodes}"
            raise ValueError(msg)


@dataclass(frozen=True)
class MLFit:
    """Result of a maximum-likelihood fit.

    ``standard_errors`` and ``intervals`` are keyed by parameter label
    (``"beta[TZ]"``); parameters held fixed because their tissue level is
    absent from the data are listed in ``fixed`` and get NaN entries.
    Intervals are Wald intervals built on the unconstrained scale.
    """

    spec: ModelSpec
    theta_hat: ParamVector
    max_loglik: float
    converged: bool
    iterations: int
    standard_errors: dict[str, float] = field(default_factory=dict)
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)
    gradient_norm: float = 0.0
    n_free: int = 0
    fixed: tuple[str, ...] = ()
    message: str = ""
    interval_kind: str = "wald"

    def estimates(self) -> dict[str, float]:
        layout = self.spec.layout()
        return dict(zip(layout.names, layout.pack(self.theta_hat).tolist()))

    def to_dict(self) -> dict:
        return {
            "method": "ml",
            "spec": self.spec.describe(),
            "estimates": self.estimates(),
            "standard_errors": self.standard_errors,
            "intervals": {k: list(v) for k, v in self.intervals.items()},
            "interval_kind": self.interval_kind,
            "loglik": self.max_loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "n_free": self.n_free,
            "fixed": list(self.fixed),
            "message": self.message,
        }


def numerical_gradient(fun, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = step
        grad[k] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return grad


def numerical_hessian(grad_fun, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Symmetrised central difference of a gradient function."""
    x = np.asarray(x, dtype=float)
    hess = np.empty((x.size, x.size))
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = step
        hess[:, k] = (grad_fun(x + e) - grad_fun(x - e)) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def free_mask(spec: ModelSpec, arr: DataArrays, priors: PriorSpec = DEFAULT_PRIORS) -> np.ndarray:
    """Boolean mask over the packed parameters that the data identify.

    Tissue effects of levels absent from the data are held at 0 and their
    δ-multipliers at 1. If the reference level is absent, the first present
    level takes its place; likewise for carcinoma among the multipliers.
    """
    layout = spec.layout(priors)
    slices = layout.slices()
    mask = np.ones(layout.size, dtype=bool)
    present = arr.levels_present(spec.grouping)
    effects = present[1:].copy()
    if not present[0] and effects.any():
        effects[np.argmax(effects)] = False
    for name in ("beta", "beta_a", "beta_n"):
        if name in slices:
            mask[slices[name]] = effects
    if "delta" in slices:
        mpresent = arr.levels_present(spec.multiplier_grouping)
        multipliers = mpresent[:-1].copy()
        if not mpresent[-1] and multipliers.any():
            multipliers[np.argmax(multipliers)] = False
        mask[slices["delta"]] = multipliers
    return mask


def _natural_derivative(layout: Layout, u: np.ndarray) -> np.ndarray:
    """dx/du for every packed parameter."""
    out = np.empty(u.size)
    for b, sl in zip(layout.blocks, layout.slices().values()):
        x = b.from_unconstrained(u[sl])
        if b.kind == "positive":
            out[sl] = x
        elif b.kind == "bounded":
            out[sl] = (x - b.lower) * (b.upper - x) / (b.upper - b.lower)
        else:
            out[sl] = 1.0
    return out


def _element_from_unconstrained(layout: Layout, index: int, value: float) -> float:
    start = 0
    for b in layout.blocks:
        if index < start + b.size:
            return float(b.from_unconstrained(np.array([value]))[0])
        start += b.size
    msg = f"parameter index {index} out of range"
    raise IndexError(msg)


def loglik_gradient(
    spec: ModelSpec, theta: ParamVector, d: Dataset, step: float = 1e-5, n_nodes: int = DEFAULT_NODES
) -> np.ndarray:
    """Gradient of the marginal log-likelihood with respect to the unconstrained parameters."""
    layout = spec.layout()
    arr = d.arrays

    def loglik(u: np.ndarray) -> float:
        return math.fsum(marginal_terms(spec, layout.from_unconstrained(u), arr, n_nodes))

    return numerical_gradient(loglik, layout.to_unconstrained(theta), step)


def fit_ml(
    spec: ModelSpec, d: Dataset, init: ParamVector | None = None, opts: MLOptions | None = None
) -> MLFit:
    """Maximise the marginal log-likelihood of ``spec`` on ``d``.

    :param spec: Model specification.
    :param d: Dataset.
    :param init: Starting values in the support of ``spec``; moment-based if omitted.
    :param opts: Optimiser settings.
    :raises NumericalError: if the log-likelihood is not finite at ``init``.
    """
    opts = opts or MLOptions()
    arr = d.arrays
    layout = spec.layout(opts.priors)
    theta0 = init if init is not None else initial_params(spec, d)
    theta0.validate(spec, opts.priors)
    mask = free_mask(spec, arr, opts.priors)
    base = layout.to_unconstrained(theta0)
    base[~mask] = 0.0

    def full(v: np.ndarray) -> np.ndarray:
        u = base.copy()
        u[mask] = v
        return u

    def loglik_full(u: np.ndarray) -> float:
        return math.fsum(marginal_terms(spec, layout.from_unconstrained(u), arr, opts.n_nodes))

    ll0 = loglik_full(base)
    scale = max(1.0, abs(ll0))

    def objective(v: np.ndarray) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                return -loglik_full(full(v)) / scale
        except (NumericalError, ModelSpecError, np.linalg.LinAlgError):
            return math.inf

    def gradient(v: np.ndarray) -> np.ndarray:
        return numerical_gradient(objective, v, opts.fd_step)

    logger.info("ML fit of %s: %d free parameter(s), initial loglik %.6f", spec.family.value, int(mask.sum()), ll0)
    result = minimize(
        objective,
        base[mask],
        jac=gradient,
        method="BFGS",
        options={"gtol": opts.gtol, "maxiter": opts.max_iter},
    )
    logger.debug("BFGS: %s (nit=%d, nfev=%d)", result.message, result.nit, result.nfev)

    theta_hat = orient_signs(spec, layout.from_unconstrained(full(result.x)))
    u_hat = layout.to_unconstrained(theta_hat)
    u_hat[~mask] = 0.0
    grad = gradient(u_hat[mask])
    grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    converged = bool(np.isfinite(grad_norm) and grad_norm < opts.gtol)
    max_loglik = loglik_full(u_hat)
    if not converged:
        msg = (
            f"{spec.family.value}: optimiser stopped after {result.nit} iteration(s) with scaled "
            f"gradient norm {grad_norm:.3g} (tolerance {opts.gtol:g}): {result.message}"
        )
        logger.warning(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)

    names = layout.names
    fixed = tuple(n for n, free in zip(names, mask) if not free)
    ses: dict[str, float] = {}
    intervals: dict[str, tuple[float, float]] = {}
    if opts.compute_se:
        ses, intervals = _wald(layout, u_hat, mask, loglik_full, opts)
    fit = MLFit(
        spec=spec,
        theta_hat=theta_hat,
        max_loglik=max_loglik,
        converged=converged,
        iterations=int(result.nit),
        standard_errors=ses,
        intervals=intervals,
        gradient_norm=grad_norm,
        n_free=int(mask.sum()),
        fixed=fixed,
        message=str(result.message),
    )
    logger.info("ML fit of %s: loglik %.6f, converged=%s", spec.family.value, max_loglik, converged)
    return fit


def _wald(layout: Layout, u_hat: np.ndarray, mask: np.ndarray, loglik_full, opts: MLOptions):
    names = layout.names
    ses = {n: math.nan for n in names}
    intervals = {n: (math.nan, math.nan) for n in names}
    free_idx = np.flatnonzero(mask)
    if free_idx.size == 0:
        return ses, intervals

    def neg_loglik(v: np.ndarray) -> float:
        u = u_hat.copy()
        u[mask] = v
        return -loglik_full(u)

    def neg_grad(v: np.ndarray) -> np.ndarray:
        return numerical_gradient(neg_loglik, v, opts.fd_step)

    try:
        hess = numerical_hessian(neg_grad, u_hat[mask], opts.hessian_step)
        np.linalg.cholesky(hess)
        cov = np.linalg.inv(hess)
    except (np.linalg.LinAlgError, NumericalError, ModelSpecError):
        msg = "observed information is not positive definite; standard errors unavailable"
        logger.warning(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
        return ses, intervals
    se_u = np.sqrt(np.diag(cov))
    deriv = _natural_derivative(layout, u_hat)
    z = float(norm.ppf(0.975))
    for k, idx in enumerate(free_idx):
        ses[names[idx]] = float(abs(deriv[idx]) * se_u[k])
        lo = _element_from_unconstrained(layout, idx, u_hat[idx] - z * se_u[k])
        hi = _element_from_unconstrained(layout, idx, u_hat[idx] + z * se_u[k])
        intervals[names[idx]] = (lo, hi)
    return ses, intervals


def lr_statistic(fit_general: MLFit, fit_constrained: MLFit) -> float:
    """2·(ℓ_general - ℓ_constrained), clamped at zero with a BoundaryWarning."""
    stat = 2.0 * (fit_general.max_loglik - fit_constrained.max_loglik)
    if stat < 0.0:
        msg = f"negative likelihood-ratio statistic {stat:.3g} clamped to 0"
        logger.warning(msg)
        warnings.warn(msg, BoundaryWarning, stacklevel=3)
        stat = 0.0
    return stat


def lrt(fit_general: MLFit, fit_constrained: MLFit, df: int) -> float:
    """p-value of the likelihood-ratio test of a nested constrained model.

    The χ² reference ignores that δ-type constraints may sit on a boundary.

    :param fit_general: Fit of the general model.
    :param fit_constrained: Fit of the nested model.
    :param df: Difference in free-parameter counts, positive.
    """
    if df <= 0:
        msg = f"degrees of freedom must be positive, got {df}"
        raise ValueError(msg)
    return float(chi2.sf(lr_statistic(fit_general, fit_constrained), df))


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p_value: float
    general: MLFit
    constrained: MLFit

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "loglik_general": self.general.max_loglik,
            "loglik_constrained": self.constrained.max_loglik,
            "general": self.general.spec.describe(),
            "constrained": self.constrained.spec.describe(),
        }


def _nested_lrt(general: ModelSpec, constrained: ModelSpec, d: Dataset, opts: MLOptions, expand) -> LRTResult:
    fit_c = fit_ml(constrained, d, opts=opts)
    fit_g = fit_ml(general, d, init=expand(fit_c.theta_hat), opts=opts)
    df = fit_g.n_free - fit_c.n_free
    p_value = lrt(fit_g, fit_c, df)
    stat = lr_statistic(fit_g, fit_c)
    logger.info("LRT %s vs %s: statistic %.4f on %d df, p=%.4g", general.describe(), constrained.describe(), stat, df, p_value)
    return LRTResult(stat, df, p_value, fit_g, fit_c)


def delta_equality_lrt(d: Dataset, grouping: Grouping = Grouping.COARSE, opts: MLOptions | None = None) -> LRTResult:
    """Test whether all circularity field-variance multipliers are equal.

    The constrained fit is done first and seeds the general fit (δ = 1), so
    the general maximum is at least the constrained one.
    """
    opts = opts or MLOptions()
    general = ModelSpec(Family.CIRC_HET, grouping)
    constrained = general.with_constraint(Constraint.DELTA_EQUAL)
    k = general.multiplier_grouping.n_levels - 1
    return _nested_lrt(general, constrained, d, opts, lambda theta: theta.replace(delta=np.ones(k)))


def delta_split_lrt(d: Dataset, opts: MLOptions | None = None) -> LRTResult:
    """Test separate δ per CIN grade against one pooled CIN δ (tissue effects pooled in both)."""
    opts = opts or MLOptions()
    constrained = ModelSpec(Family.CIRC_HET, Grouping.COARSE)
    general = ModelSpec(Family.CIRC_HET, Grouping.COARSE, delta_grouping=Grouping.FINE)
    coarse_index = [Grouping.COARSE.level_of(TissueType(code)) for code in Grouping.FINE.multiplier_levels]

    def expand(theta: ParamVector) -> ParamVector:
        pooled = np.concatenate([theta["delta"], [1.0]])
        return theta.replace(delta=pooled[coarse_index])

    return _nested_lrt(general, constrained, d, opts, expand)


@dataclass(frozen=True)
class OverdispersionReport:
    """Poisson against negative-binomial random-effects fit of LVD."""

    poisson: MLFit
    negbin: MLFit

    @property
    def delta_loglik(self) -> float:
        return self.negbin.max_loglik - self.poisson.max_loglik

    @property
    def dispersion(self) -> float:
        return self.negbin.theta_hat.scalar("dispersion")

    def to_dict(self) -> dict:
        return {
            "loglik_poisson": self.poisson.max_loglik,
            "loglik_negbin": self.negbin.max_loglik,
            "delta_loglik": self.delta_loglik,
            "dispersion": self.dispersion,
            "dispersion_se": self.negbin.standard_errors.get("dispersion", math.nan),
            "poisson": self.poisson.to_dict(),
            "negbin": self.negbin.to_dict(),
        }


def compare_overdispersion(
    d: Dataset, grouping: Grouping = Grouping.COARSE, opts: MLOptions | None = None, start_dispersion: float = 50.0
) -> OverdispersionReport:
    """Fit LVD_POIS and LVD_NEGBIN; the NB fit starts from the Poisson estimate."""
    opts = opts or MLOptions()
    pois = fit_ml(ModelSpec(Family.LVD_POIS, grouping), d, opts=opts)
    init = pois.theta_hat.replace(dispersion=start_dispersion)
    negbin = fit_ml(ModelSpec(Family.LVD_NEGBIN, grouping), d, init=init, opts=opts)
    report = OverdispersionReport(pois, negbin)
    logger.info("overdispersion: delta loglik %.4f, dispersion %.4g", report.delta_loglik, report.dispersion)
    return report


@dataclass(frozen=True)
class NaiveRow:
    label: str
    estimate: float
    naive_se: float
    model_se: float

    @property
    def inflation(self) -> float:
        return self.model_se / self.naive_se if self.naive_se > 0.0 else math.nan


def naive_standard_errors(fit: MLFit, d: Dataset) -> list[NaiveRow]:
    """Ordinary least-squares fixed effects ignoring clustering, beside the hierarchical SEs.

    :param fit: ML fit of a Gaussian family.
    :param d: The data ``fit`` was computed on.
    """
    spec = fit.spec
    if not spec.family.is_gaussian:
        msg = f"naive least squares is defined for Gaussian families, not {spec.family.value}"
        raise ModelSpecError(msg)
    arr = d.arrays
    level = arr.field_level(spec.grouping)
    mask = free_mask(spec, arr)
    layout = spec.layout()
    names = layout.names
    slices = layout.slices()
    beta_labels = [n for n, free in zip(names[slices["beta"]], mask[slices["beta"]]) if free]
    beta_levels = [k + 1 for k, free in enumerate(mask[slices["beta"]]) if free]
    columns = [np.ones(arr.n_fields)] + [(level == lv).astype(float) for lv in beta_levels]
    labels = ["alpha", *beta_labels]
    if spec.family is Family.VA_CONDITIONAL:
        columns.append(1.0 / arr.lvd)
        labels.append("gamma")
    x = np.column_stack(columns)
    if spec.family is Family.PLA_LMM:
        y = arr.pla
    else:
        y = getattr(arr, spec.family.vessel_outcome)
        x = x[arr.vessel_field]
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < x.shape[1]:
        msg = "naive design matrix is rank deficient"
        raise NumericalError(msg)
    resid = y - x @ coef
    s2 = float(resid @ resid) / (y.size - x.shape[1])
    naive = np.sqrt(s2 * np.diag(np.linalg.inv(x.T @ x)))
    return [
        NaiveRow(lab, float(c), float(se), fit.standard_errors.get(lab, math.nan))
        for lab, c, se in zip(labels, coef, naive)
    ]


def field_effects_posterior_mean(spec: ModelSpec, theta: ParamVector, d: Dataset) -> pd.DataFrame:
    """Conditional means of specimen and field effects given the data, one row per field.

    :param spec: A Gaussian family with field effects.
    :param theta: Parameters, typically an ML estimate.
    :param d: Dataset.
    """
    if not (spec.family.is_gaussian and spec.family.has_field_effect):
        msg = f"field effects are available for three-level Gaussian families, not {spec.family.value}"
        raise ModelSpecError(msg)
    arr = d.arrays
    sigma2 = theta.scalar("sigma2")
    tau2 = theta.scalar("tau2")
    y = getattr(arr, spec.family.vessel_outcome)
    resid = y - field_fixed_predictor(spec, theta, arr)[arr.vessel_field]
    n = np.bincount(arr.vessel_field, minlength=arr.n_fields).astype(float)
    s = np.bincount(arr.vessel_field, weights=resid, minlength=arr.n_fields)
    c = theta.scalar("nu2") * field_variance_multiplier(spec, theta, arr)
    big_d = sigma2 + n * c
    idx = arr.field_specimen
    u = np.bincount(idx, weights=n / big_d, minlength=arr.n_specimens)
    w = np.bincount(idx, weights=s / big_d, minlength=arr.n_specimens)
    a_hat = tau2 * w / (1.0 + tau2 * u)
    b_hat = c * (s - n * a_hat[idx]) / big_d
    return pd.DataFrame(
        {
            "specimen_id": [k[0] for k in arr.field_keys],
            "field_id": [k[1] for k in arr.field_keys],
            "tissue": [t.value for t in arr.field_tissue],
            "lvd": arr.lvd,
            "specimen_effect": a_hat[idx],
            "field_effect": b_hat,
        }
    )
