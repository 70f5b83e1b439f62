"""Module for the likelihood, prior and log-posterior kernels of every model family."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from clustersize.constraint import Constraint, Family
from clustersize.dataset import DataArrays, Dataset
from clustersize.errors import ModelSpecError
from clustersize.params import DEFAULT_PRIORS, LatentState, ModelSpec, ParamVector, PriorSpec

LOG_2PI = math.log(2.0 * math.pi)


def shifted_poisson_logpmf(n: int | np.ndarray, mu: float | np.ndarray) -> float | np.ndarray:
    """log P(N = n) for N = 1 + Poisson(mu).

    :param n: Count(s), each at least 1.
    :param mu: Poisson mean(s) of N - 1, nonnegative.
    """
    n = np.asarray(n)
    if np.any(n < 1):
        msg = "shifted Poisson counts must be >= 1"
        raise ValueError(msg)
    k = n - 1
    out = xlogy(k, mu) - mu - gammaln(k + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def shifted_negbin_logpmf(
    n: int | np.ndarray, mu: float | np.ndarray, dispersion: float
) -> float | np.ndarray:
    """log P(N = n) for N - 1 negative binomial with mean mu and Var = mu + mu²/dispersion.

    :param n: Count(s), each at least 1.
    :param mu: Mean(s) of N - 1.
    :param dispersion: κ > 0; κ → ∞ recovers the shifted Poisson.
    """
    n = np.asarray(n)
    if np.any(n < 1):
        msg = "shifted negative binomial counts must be >= 1"
        raise ValueError(msg)
    k = n - 1.0
    kappa = float(dispersion)
    log_total = np.log(kappa + mu)
    out = (
        gammaln(k + kappa)
        - gammaln(kappa)
        - gammaln(k + 1.0)
        + kappa * (math.log(kappa) - log_total)
        + xlogy(k, mu)
        - k * log_total
    )
    return float(out) if np.ndim(out) == 0 else out


def _normal_logpdf(resid: np.ndarray, var: float | np.ndarray) -> np.ndarray:
    return -0.5 * (LOG_2PI + np.log(var) + resid * resid / var)


def _check_variances(theta: ParamVector, names: tuple[str, ...]) -> None:
    for name in names:
        value = theta.get(name)
        if value is not None and not np.all(value > 0.0):
            msg = f"{name} must be positive, got {value.tolist()}"
            raise ModelSpecError(msg)


def _shift(arr: np.ndarray) -> np.ndarray:
    """Prepend the reference level's zero effect."""
    return np.concatenate([[0.0], arr])


def field_fixed_predictor(
    spec: ModelSpec, theta: ParamVector, arr: DataArrays, outcome: str = ""
) -> np.ndarray:
    """Fixed part of the linear predictor for every field.

    :param spec: Model specification.
    :param theta: Parameters.
    :param arr: Canonical data arrays.
    :param outcome: ``"a"`` or ``"n"`` to select a JOINT sub-model, empty otherwise.
    """
    suffix = f"_{outcome}" if outcome else ""
    level = arr.field_level(spec.grouping)
    eta = theta.scalar(f"alpha{suffix}") + _shift(theta[f"beta{suffix}"])[level]
    if spec.family is Family.VA_CONDITIONAL:
        eta = eta + theta.scalar("gamma") / arr.lvd
    return eta


def field_variance_multiplier(spec: ModelSpec, theta: ParamVector, arr: DataArrays) -> np.ndarray:
    """δ-multiplier of ν² for every field (ones outside the heteroscedastic model)."""
    if spec.family is not Family.CIRC_HET or spec.has(Constraint.DELTA_EQUAL):
        return np.ones(arr.n_fields)
    level = arr.field_level(spec.multiplier_grouping)
    return np.concatenate([theta["delta"], [1.0]])[level]


def _specimen_sum(values: np.ndarray, index: np.ndarray, n_specimens: int) -> np.ndarray:
    return np.bincount(index, weights=values, minlength=n_specimens)


def conditional_terms(
    spec: ModelSpec, theta: ParamVector, latent: LatentState, arr: DataArrays
) -> dict[str, np.ndarray]:
    """Per-specimen conditional log-likelihood contributions, keyed by outcome.

    Keys: ``"pla"``, ``"count"`` or ``"vessel"``; JOINT has both ``"vessel"``
    and ``"count"``.
    """
    fam = spec.family
    m = arr.n_specimens
    latent.check(spec, m, arr.n_fields)
    _check_variances(theta, ("tau2", "nu2", "sigma2", "delta", "dispersion"))
    a = np.asarray(latent.a, dtype=float)
    if fam is Family.PLA_LMM:
        mean = field_fixed_predictor(spec, theta, arr) + a[arr.field_specimen]
        terms = _normal_logpdf(arr.pla - mean, theta.scalar("sigma2"))
        return {"pla": _specimen_sum(terms, arr.field_specimen, m)}
    if fam.is_count:
        mu = np.exp(field_fixed_predictor(spec, theta, arr) + a[arr.field_specimen])
        if fam is Family.LVD_NEGBIN:
            terms = shifted_negbin_logpmf(arr.lvd, mu, theta.scalar("dispersion"))
        else:
            terms = shifted_poisson_logpmf(arr.lvd, mu)
        return {"count": _specimen_sum(terms, arr.field_specimen, m)}
    b = np.asarray(latent.b, dtype=float)
    y = getattr(arr, fam.vessel_outcome)
    if fam is Family.JOINT:
        field_mean = (
            field_fixed_predictor(spec, theta, arr, "a")
            + theta.scalar("lambda_a") * a[arr.field_specimen, 0]
            + b
        )
        log_mu = field_fixed_predictor(spec, theta, arr, "n") + theta.scalar("lambda_n") * a[arr.field_specimen, 1]
        vessel = _normal_logpdf(y - field_mean[arr.vessel_field], theta.scalar("sigma2"))
        count = shifted_poisson_logpmf(arr.lvd, np.exp(log_mu))
        return {
            "vessel": _specimen_sum(vessel, arr.vessel_specimen, m),
            "count": _specimen_sum(count, arr.field_specimen, m),
        }
    field_mean = field_fixed_predictor(spec, theta, arr) + a[arr.field_specimen] + b
    vessel = _normal_logpdf(y - field_mean[arr.vessel_field], theta.scalar("sigma2"))
    return {"vessel": _specimen_sum(vessel, arr.vessel_specimen, m)}


def loglik_conditional(spec: ModelSpec, theta: ParamVector, latent: LatentState, d: Dataset) -> float:
    """Log density of the observed outcomes given the random effects.

    :param spec: Model specification.
    :param theta: Parameters consistent with ``spec``.
    :param latent: Specimen (and field) effects with dimensions matching ``d``.
    :param d: Dataset.
    """
    terms = conditional_terms(spec, theta, latent, d.arrays)
    return math.fsum(math.fsum(v) for v in terms.values())


def specimen_effect_logdensity(spec: ModelSpec, theta: ParamVector, a: np.ndarray) -> np.ndarray:
    """Per-specimen log density of the specimen effects.

    Univariate families use N(0, τ²). JOINT uses the bivariate normal with unit
    variances and correlation ρ (identity when ρ is constrained to zero).
    """
    a = np.asarray(a, dtype=float)
    if spec.family is not Family.JOINT:
        return _normal_logpdf(a, theta.scalar("tau2"))
    rho = 0.0 if spec.has(Constraint.RHO_ZERO) else theta.scalar("rho")
    one_minus = 1.0 - rho * rho
    quad = (a[:, 0] ** 2 - 2.0 * rho * a[:, 0] * a[:, 1] + a[:, 1] ** 2) / one_minus
    return -LOG_2PI - 0.5 * math.log(one_minus) - 0.5 * quad


def latent_terms(spec: ModelSpec, theta: ParamVector, latent: LatentState, arr: DataArrays) -> np.ndarray:
    """Per-specimen log density of all random effects (specimen effect plus its fields)."""
    latent.check(spec, arr.n_specimens, arr.n_fields)
    out = specimen_effect_logdensity(spec, theta, latent.a)
    if spec.family.has_field_effect:
        var = theta.scalar("nu2") * field_variance_multiplier(spec, theta, arr)
        out = out + _specimen_sum(_normal_logpdf(np.asarray(latent.b), var), arr.field_specimen, arr.n_specimens)
    return out


def _gamma_logpdf(x: np.ndarray, shape: float, rate: float) -> np.ndarray:
    return shape * math.log(rate) - gammaln(shape) + xlogy(shape - 1.0, x) - rate * x


def logprior(spec: ModelSpec, priors: PriorSpec, theta: ParamVector) -> float:
    """Sum of log prior densities; -inf outside the prior support.

    Gamma priors are evaluated at precisions (1/variance, 1/δ) and at the
    negative-binomial dispersion κ; loadings and ρ are uniform on their bounds.
    """
    total = []
    prec = priors.fixed_precision
    for b in spec.layout(priors).blocks:
        value = theta.get(b.name)
        if value is None:
            msg = f"missing parameter block {b.name!r}"
            raise ModelSpecError(msg)
        if not np.all(np.isfinite(value)):
            return -math.inf
        if b.kind == "real":
            total.append(float(np.sum(0.5 * math.log(prec / (2.0 * math.pi)) - 0.5 * prec * value * value)))
        elif b.kind == "positive":
            if np.any(value <= 0.0):
                return -math.inf
            x = value if b.name == "dispersion" else 1.0 / value
            total.append(float(np.sum(_gamma_logpdf(x, priors.gamma_shape, priors.gamma_rate))))
        else:
            if np.any(value <= b.lower) or np.any(value >= b.upper):
                return -math.inf
            total.append(-b.size * math.log(b.upper - b.lower))
    return math.fsum(total)


def logpost(
    spec: ModelSpec,
    priors: PriorSpec,
    theta: ParamVector,
    latent: LatentState,
    d: Dataset,
) -> float:
    """Unnormalised log posterior: prior + conditional likelihood + random-effect density."""
    lp = logprior(spec, priors, theta)
    if lp == -math.inf:
        return -math.inf
    arr = d.arrays
    cond = conditional_terms(spec, theta, latent, arr)
    lat = latent_terms(spec, theta, latent, arr)
    return lp + math.fsum(math.fsum(v) for v in cond.values()) + math.fsum(lat)


def icc(between_var: float, residual_var: float) -> float:
    """Intra-cluster correlation between/(between + residual).

    :param between_var: Between-cluster variance, positive.
    :param residual_var: Residual (within-cluster) variance, positive.
    """
    if not (between_var > 0.0 and residual_var > 0.0):
        msg = f"variances must be positive, got {between_var} and {residual_var}"
        raise ValueError(msg)
    return between_var / (between_var + residual_var)


def icc_levels(spec: ModelSpec, theta: ParamVector) -> dict[str, float]:
    """ICCs of a Gaussian hierarchical model.

    ``specimen`` is the correlation of two observations from one specimen but
    different fields; ``field`` (three-level models) that of two vessels in one
    field.
    """
    if not spec.family.is_gaussian:
        msg = f"ICCs are defined for Gaussian families, not {spec.family.value}"
        raise ModelSpecError(msg)
    tau2 = theta.scalar("tau2")
    sigma2 = theta.scalar("sigma2")
    if not spec.family.has_field_effect:
        return {"specimen": icc(tau2, sigma2)}
    nu2 = theta.scalar("nu2")
    return {"specimen": icc(tau2, nu2 + sigma2), "field": icc(tau2 + nu2, sigma2)}


@dataclass(frozen=True)
class EffectRow:
    """Tissue effect versus control ectocervix for one outcome."""

    outcome: str
    level: str
    coefficient: float
    ratio: float | None

    @property
    def phrase(self) -> str:
        if self.ratio is None:
            return f"{self.coefficient:+.2f} difference"
        if self.ratio >= 1.0:
            return f"{self.ratio:.2f}-fold increase"
        return f"{1.0 / self.ratio:.2f}-fold reduction"


_OUTCOME_NAMES = {
    Family.PLA_LMM: "pla",
    Family.LVD_POIS: "lvd",
    Family.LVD_NEGBIN: "lvd",
    Family.VA_LMM: "vessel_area",
    Family.VA_CONDITIONAL: "vessel_area",
    Family.CIRC_HET: "circularity",
}


def effect_table(theta: ParamVector, spec: ModelSpec) -> list[EffectRow]:
    """Tissue effects as fold-changes (log/logit links) or raw differences (%LA)."""
    levels = spec.grouping.effect_levels
    if spec.family is Family.JOINT:
        parts = [("lvd", theta["beta_n"]), ("vessel_area", theta["beta_a"])]
    else:
        parts = [(_OUTCOME_NAMES[spec.family], theta["beta"])]
    rows = []
    for outcome, beta in parts:
        for level, coef in zip(levels, beta):
            ratio = None if outcome == "pla" else float(math.exp(coef))
            rows.append(EffectRow(outcome, level, float(coef), ratio))
    return rows


def initial_params(spec: ModelSpec, d: Dataset) -> ParamVector:
    """Moment-based starting values for fitting ``spec`` to ``d``."""
    arr = d.arrays
    levels = arr.field_level(spec.grouping)
    n_eff = spec.grouping.n_levels - 1
    fam = spec.family

    def level_effects(values: np.ndarray, level: np.ndarray) -> tuple[float, np.ndarray]:
        ref = values[level == 0]
        base = float(np.mean(ref)) if ref.size else float(np.mean(values))
        beta = np.zeros(n_eff)
        for lv in range(1, n_eff + 1):
            sel = values[level == lv]
            if sel.size:
                beta[lv - 1] = float(np.mean(sel)) - base
        return base, beta

    if fam is Family.PLA_LMM:
        alpha, beta = level_effects(arr.pla, levels)
        var = max(float(np.var(arr.pla)), 1e-2)
        return ParamVector(alpha=alpha, beta=beta, tau2=0.2 * var, sigma2=0.8 * var)
    log_rate = np.log(np.maximum(arr.lvd - 1.0, 0.5))
    if fam.is_count:
        alpha, beta = level_effects(log_rate, levels)
        theta = ParamVector(alpha=alpha, beta=beta, tau2=0.1)
        return theta.replace(dispersion=10.0) if fam is Family.LVD_NEGBIN else theta
    y = getattr(arr, fam.vessel_outcome)
    alpha, beta = level_effects(y, levels[arr.vessel_field])
    var = max(float(np.var(y)), 1e-2)
    if fam is Family.JOINT:
        alpha_n, beta_n = level_effects(log_rate, levels)
        theta = ParamVector(
            alpha_a=alpha,
            beta_a=beta,
            alpha_n=alpha_n,
            beta_n=beta_n,
            lambda_a=0.3 * math.sqrt(var),
            lambda_n=0.1,
            nu2=0.15 * var,
            sigma2=0.7 * var,
        )
        return theta if spec.has(Constraint.RHO_ZERO) else theta.replace(rho=0.0)
    theta = ParamVector(alpha=alpha, beta=beta, tau2=0.1 * var, nu2=0.15 * var, sigma2=0.75 * var)
    if fam is Family.VA_CONDITIONAL:
        theta = theta.replace(gamma=0.0)
    if fam is Family.CIRC_HET and not spec.has(Constraint.DELTA_EQUAL):
        theta = theta.replace(delta=np.ones(spec.multiplier_grouping.n_levels - 1))
    return theta


def orient_signs(spec: ModelSpec, theta: ParamVector) -> ParamVector:
    """Reflect JOINT loadings to the reporting convention λ^A ≥ 0, λ^N ≤ 0.

    Flipping (λ^A, a^A, ρ) or (λ^N, a^N, ρ) leaves the likelihood unchanged,
    so each reflection that is needed also flips ρ. Other families pass through.
    """
    if spec.family is not Family.JOINT:
        return theta
    lam_a = theta.scalar("lambda_a")
    lam_n = theta.scalar("lambda_n")
    flips = int(lam_a < 0.0) + int(lam_n > 0.0)
    out = theta.replace(lambda_a=abs(lam_a), lambda_n=-abs(lam_n))
    if "rho" in theta and flips % 2 == 1:
        out = out.replace(rho=-theta.scalar("rho"))
    return out
