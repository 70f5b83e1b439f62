"""Module for Bayesian fitting by adaptive Metropolis-within-Gibbs.

Update order within one sweep (fixed for every family):

* Gaussian families: (a, b) jointly from their exact conditional (b
  integrated out for a), fixed effects by conjugate Gibbs, then the
  variances (σ², ν², δ, τ²) by conjugate Gibbs on their precisions, then a
  shift move of (α, a).
* Count families: a per specimen by random-walk Metropolis, (α, β) by an
  adaptive block random walk, τ² by Gibbs, κ on the log scale, then the
  shift move.
* JOINT: (a^A, a^N) per specimen by a bivariate random walk with b
  integrated out, b by Gibbs, vessel fixed effects by Gibbs, λ^A on its
  bounded transform, LVD fixed effects by a block random walk, λ^N and ρ on
  their bounded transforms, σ² and ν² by Gibbs, then scale moves
  (λ, a) → (λe^s, ae^-s) and shift moves (α, a) for each outcome.

Random-walk scales adapt during burn-in only. Each chain draws from
``SeedSequence(seed).spawn(n_chains)[chain]``, so results do not depend on
the number of workers.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import cho_solve, solve_triangular

from clustersize.constraint import Constraint, Family
from clustersize.dataset import Dataset
from clustersize.diagnostics import FitResult, autocorrelation, ess, split_rhat, summarize_posterior
from clustersize.errors import ModelSpecError, NumericalError
from clustersize.mlfit import free_mask
from clustersize.model import (
    _gamma_logpdf,
    conditional_terms,
    initial_params,
    latent_terms,
    logpost,
    logprior,
    orient_signs,
    shifted_negbin_logpmf,
    shifted_poisson_logpmf,
)
from clustersize.params import DEFAULT_PRIORS, LatentState, ModelSpec, ParamVector, PriorSpec
from clustersize.tissue import Grouping

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChainConfig:
    """MCMC run settings.

    :param burn_in: Iterations discarded, during which proposals adapt.
    :param keep_iterations: Iterations after burn-in; every ``thin``-th is kept.
    :param thin: Thinning factor, at least 1.
    :param n_chains: Independent chains.
    :param seed: Base seed.
    :param target_scalar: Target acceptance of scalar and per-specimen random walks.
    :param target_block: Target acceptance of block random walks.
    :param adapt_window: Iterations between refreshes of block proposal shapes.
    :param init_jitter: SD of the perturbation, on the unconstrained scale,
        applied to the starting values of every chain but the first.
    """

    burn_in: int = 50_000
    keep_iterations: int = 50_000
    thin: int = 20
    n_chains: int = 4
    seed: int = 0
    target_scalar: float = 0.44
    target_block: float = 0.234
    adapt_window: int = 100
    init_jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.thin < 1:
            msg = f"thin must be at least 1, got {self.thin}"
            raise ValueError(msg)
        if self.burn_in < 0 or self.keep_iterations < 0:
            msg = "burn_in and keep_iterations must be nonnegative"
            raise ValueError(msg)
        if self.n_chains < 1:
            msg = f"n_chains must be at least 1, got {self.n_chains}"
            raise ValueError(msg)
        for name in ("target_scalar", "target_block"):
            if not 0.0 < getattr(self, name) < 1.0:
                msg = f"{name} must lie in (0, 1), got {getattr(self, name)}"
                raise ValueError(msg)
        if self.adapt_window < 1 or self.init_jitter < 0.0:
            msg = "adapt_window must be >= 1 and init_jitter >= 0"
            raise ValueError(msg)

    @property
    def n_kept(self) -> int:
        return self.keep_iterations // self.thin

    @classmethod
    def desk(cls, seed: int = 0, n_chains: int = 4) -> ChainConfig:
        """Scaled-down run: burn-in 5,000, keep 5,000, thin 5."""
        return cls(burn_in=5_000, keep_iterations=5_000, thin=5, n_chains=n_chains, seed=seed)

    def to_dict(self) -> dict:
        return {
            "burn_in": self.burn_in,
            "keep_iterations": self.keep_iterations,
            "thin": self.thin,
            "n_chains": self.n_chains,
            "seed": self.seed,
            "target_scalar": self.target_scalar,
            "target_block": self.target_block,
            "adapt_window": self.adapt_window,
            "init_jitter": self.init_jitter,
        }


def metropolis_accept(rng: np.random.Generator, log_ratio: float | np.ndarray) -> bool | np.ndarray:
    """Accept with probability min(1, exp(log_ratio)); NaN ratios are rejected.

    Works elementwise on arrays of independent proposals.
    """
    ratio = np.asarray(log_ratio, dtype=float)
    ratio = np.where(np.isnan(ratio), -np.inf, ratio)
    u = rng.random(ratio.shape)
    accept = np.log1p(-u) < ratio
    return bool(accept) if accept.ndim == 0 else accept


class RandomWalkBlock:
    """Adaptive Gaussian random walk on one block of unconstrained coordinates.

    While adapting, the log proposal scale follows a Robbins-Monro recursion
    toward ``target`` and, for blocks of dimension > 1, the proposal shape is
    refreshed every ``window`` iterations from the covariance of the visited
    states.
    """

    def __init__(self, name: str, dim: int, target: float, window: int = 100, scale: float = 0.1) -> None:
        self.name = name
        self.dim = dim
        self.target = target
        self.window = window
        self.log_scale = math.log(scale)
        self.chol = np.eye(dim)
        self.adapting = True
        self.proposed = 0
        self.accepted = 0
        self._t = 0
        self._n = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))
        self._shaped = False

    def propose(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        return x + math.exp(self.log_scale) * (self.chol @ rng.standard_normal(self.dim))

    def record(self, accepted: bool, x: np.ndarray) -> None:
        self.proposed += 1
        self.accepted += int(accepted)
        if not self.adapting:
            return
        self._t += 1
        self.log_scale += min(1.0, self._t**-0.6) * (float(accepted) - self.target)
        if self.dim == 1:
            return
        self._n += 1
        delta = x - self._mean
        self._mean += delta / self._n
        self._m2 += np.outer(delta, x - self._mean)
        if self._n >= 2 * self.window and self._n % self.window == 0:
            cov = self._m2 / (self._n - 1)
            cov += 1e-10 * max(float(np.trace(cov)) / self.dim, 1e-12) * np.eye(self.dim)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                return
            if not self._shaped:
                self.log_scale = math.log(2.38 / math.sqrt(self.dim))
                self._shaped = True

    def step(
        self, rng: np.random.Generator, x: np.ndarray, logdensity: Callable[[np.ndarray], float], current: float
    ) -> tuple[np.ndarray, float]:
        """One Metropolis step; returns the new state and its log density."""
        prop = self.propose(rng, x)
        value = logdensity(prop)
        accepted = metropolis_accept(rng, value - current)
        if accepted:
            x, current = prop, value
        self.record(accepted, x)
        return x, current

    def freeze(self) -> None:
        self.adapting = False
        self.proposed = 0
        self.accepted = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else math.nan


class UnitwiseRandomWalk:
    """Independent random walks, one per unit (specimen), each with its own adaptive scale."""

    def __init__(self, name: str, n_units: int, dim: int, target: float, scale: float = 0.5) -> None:
        self.name = name
        self.dim = dim
        self.target = target
        self.log_scale = np.full(n_units, math.log(scale))
        self.adapting = True
        self.proposed = 0
        self.accepted = 0
        self._t = 0

    def propose(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        step = np.exp(self.log_scale)
        if self.dim == 1:
            return x + step * rng.standard_normal(x.shape)
        return x + step[:, None] * rng.standard_normal(x.shape)

    def record(self, accepted: np.ndarray) -> None:
        self.proposed += accepted.size
        self.accepted += int(np.sum(accepted))
        if self.adapting:
            self._t += 1
            self.log_scale += min(1.0, self._t**-0.6) * (accepted.astype(float) - self.target)

    def freeze(self) -> None:
        self.adapting = False
        self.proposed = 0
        self.accepted = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else math.nan


@dataclass(frozen=True)
class SamplerTrace:
    draws: np.ndarray
    acceptance_rate: float


def sample_logdensity(
    logdensity: Callable[[np.ndarray], float],
    x0: np.ndarray | float,
    n_burn: int,
    n_keep: int,
    thin: int = 1,
    seed: int | np.random.SeedSequence = 0,
    target: float | None = None,
    scale: float = 1.0,
    adapt: bool = True,
) -> SamplerTrace:
    """Random-walk Metropolis on an arbitrary log density.

    :param logdensity: Unnormalised log density of a 1-D array.
    :param x0: Starting point.
    :param n_burn: Burn-in iterations (adaptation happens only here).
    :param n_keep: Iterations after burn-in.
    :param thin: Keep every ``thin``-th draw.
    :param seed: Seed or SeedSequence.
    :param target: Target acceptance; 0.44 in one dimension, 0.234 otherwise.
    :param scale: Initial proposal scale.
    :param adapt: Set False to keep ``scale`` fixed.
    """
    x = np.atleast_1d(np.array(x0, dtype=float))
    if target is None:
        target = 0.44 if x.size == 1 else 0.234
    rng = np.random.default_rng(seed)
    walk = RandomWalkBlock("x", x.size, target, scale=scale)
    if not adapt:
        walk.freeze()
    current = logdensity(x)
    if not np.isfinite(current):
        msg = f"log density is not finite at the starting point {x.tolist()}"
        raise NumericalError(msg)
    for _ in range(n_burn):
        x, current = walk.step(rng, x, logdensity, current)
    walk.freeze()
    kept = []
    for it in range(n_keep):
        x, current = walk.step(rng, x, logdensity, current)
        if (it + 1) % thin == 0:
            kept.append(x.copy())
    draws = np.array(kept).reshape(len(kept), x.size)
    return SamplerTrace(draws, walk.acceptance_rate)


def _bivariate_quad(a: np.ndarray, rho: float) -> np.ndarray:
    return (a[:, 0] ** 2 - 2.0 * rho * a[:, 0] * a[:, 1] + a[:, 1] ** 2) / (1.0 - rho * rho)


class _ChainSampler:
    """Mutable state and update kernels of one chain."""

    def __init__(
        self, spec: ModelSpec, priors: PriorSpec, d: Dataset, config: ChainConfig, theta: ParamVector, rng
    ) -> None:
        self.spec = spec
        self.priors = priors
        self.d = d
        self.config = config
        self.rng = rng
        arr = d.arrays
        self.arr = arr
        fam = spec.family
        self.fam = fam
        self.m = arr.n_specimens
        self.n_fields = arr.n_fields
        self.idx = arr.field_specimen
        self.vf = arr.vessel_field
        self.vs = arr.vessel_specimen
        self.n_f = np.bincount(self.vf, minlength=self.n_fields).astype(float)
        self.fields_per_specimen = np.bincount(self.idx, minlength=self.m).astype(float)
        self.lvd = arr.lvd
        self.layout = spec.layout(priors)
        mask = free_mask(spec, arr, priors)
        slices = self.layout.slices()
        self.fixed = tuple(n for n, free in zip(self.layout.names, mask) if not free)
        beta_name = "beta_a" if fam is Family.JOINT else "beta"
        self.beta_free = mask[slices[beta_name]]
        self.n_beta = spec.grouping.n_levels - 1
        level = arr.field_level(spec.grouping)
        cols = [np.ones(self.n_fields)] + [
            (level == k + 1).astype(float) for k in range(self.n_beta) if self.beta_free[k]
        ]
        if fam is Family.VA_CONDITIONAL:
            cols.append(1.0 / arr.lvd)
        self.x_field = np.column_stack(cols)
        self.xtx_field = self.x_field.T @ self.x_field
        self.xtx_vessel = self.x_field.T @ (self.n_f[:, None] * self.x_field)

        self.has_delta = fam is Family.CIRC_HET and not spec.has(Constraint.DELTA_EQUAL)
        if self.has_delta:
            self.mult_level = arr.field_level(spec.multiplier_grouping)
            self.delta_free = mask[slices["delta"]]
        if fam is Family.PLA_LMM:
            self.y = arr.pla
        elif fam.vessel_outcome is not None:
            self.y = getattr(arr, fam.vessel_outcome)

        self._load(theta)
        self.a = np.zeros((self.m, 2)) if fam is Family.JOINT else np.zeros(self.m)
        self.b = np.zeros(self.n_fields) if fam.has_field_effect else None

        t_s, t_b, w = config.target_scalar, config.target_block, config.adapt_window
        self.walks: dict[str, RandomWalkBlock | UnitwiseRandomWalk] = {}
        if fam.is_count:
            self.walks["a"] = UnitwiseRandomWalk("a", self.m, 1, t_s)
            self.walks["coef"] = RandomWalkBlock("coef", self.coef.size, t_b, w)
            if fam is Family.LVD_NEGBIN:
                self.walks["dispersion"] = RandomWalkBlock("dispersion", 1, t_s, w, scale=0.5)
        if fam is Family.JOINT:
            self.walks["a"] = UnitwiseRandomWalk("a", self.m, 2, t_b)
            self.walks["lambda_a"] = RandomWalkBlock("lambda_a", 1, t_s, w, scale=0.3)
            self.walks["coef_n"] = RandomWalkBlock("coef_n", self.coef_n.size, t_b, w)
            self.walks["lambda_n"] = RandomWalkBlock("lambda_n", 1, t_s, w, scale=0.3)
            if not spec.has(Constraint.RHO_ZERO):
                self.walks["rho"] = RandomWalkBlock("rho", 1, t_s, w, scale=0.5)
            self.walks["scale_a"] = RandomWalkBlock("scale_a", 1, t_s, w)
            self.walks["scale_n"] = RandomWalkBlock("scale_n", 1, t_s, w)
            self.walks["shift_a"] = RandomWalkBlock("shift_a", 1, t_s, w)
            self.walks["shift_n"] = RandomWalkBlock("shift_n", 1, t_s, w)
        else:
            self.walks["shift"] = RandomWalkBlock("shift", 1, t_s, w)

    # -- state conversion -------------------------------------------------

    def _coef_from(self, theta: ParamVector, suffix: str = "") -> np.ndarray:
        parts = [theta[f"alpha{suffix}"], theta[f"beta{suffix}"][self.beta_free]]
        if self.fam is Family.VA_CONDITIONAL:
            parts.append(theta["gamma"])
        return np.concatenate(parts)

    def _beta_full(self, coef: np.ndarray) -> np.ndarray:
        beta = np.zeros(self.n_beta)
        beta[self.beta_free] = coef[1 : 1 + int(self.beta_free.sum())]
        return beta

    def _load(self, theta: ParamVector) -> None:
        fam = self.fam
        if fam is Family.JOINT:
            self.coef = self._coef_from(theta, "_a")
            self.coef_n = self._coef_from(theta, "_n")
            self.lam_a = theta.scalar("lambda_a")
            self.lam_n = theta.scalar("lambda_n")
            self.rho = 0.0 if self.spec.has(Constraint.RHO_ZERO) else theta.scalar("rho")
            self.nu2 = theta.scalar("nu2")
            self.sigma2 = theta.scalar("sigma2")
            return
        self.coef = self._coef_from(theta)
        self.tau2 = theta.scalar("tau2")
        self.nu2 = theta.scalar("nu2") if fam.has_field_effect else None
        self.sigma2 = theta.scalar("sigma2") if "sigma2" in theta else None
        self.delta = np.array(theta["delta"], dtype=float) if self.has_delta else None
        self.kappa = theta.scalar("dispersion") if fam is Family.LVD_NEGBIN else None

    def theta(self) -> ParamVector:
        fam = self.fam
        if fam is Family.JOINT:
            values = {
                "alpha_a": self.coef[0],
                "beta_a": self._beta_full(self.coef),
                "alpha_n": self.coef_n[0],
                "beta_n": self._beta_full(self.coef_n),
                "lambda_a": self.lam_a,
                "lambda_n": self.lam_n,
                "nu2": self.nu2,
                "sigma2": self.sigma2,
            }
            if not self.spec.has(Constraint.RHO_ZERO):
                values["rho"] = self.rho
            return ParamVector(values)
        values = {"alpha": self.coef[0], "beta": self._beta_full(self.coef), "tau2": self.tau2}
        if fam is Family.VA_CONDITIONAL:
            values["gamma"] = self.coef[-1]
        if self.nu2 is not None:
            values["nu2"] = self.nu2
        if self.sigma2 is not None:
            values["sigma2"] = self.sigma2
        if self.has_delta:
            values["delta"] = self.delta
        if self.kappa is not None:
            values["dispersion"] = self.kappa
        return ParamVector(values)

    def latent(self) -> LatentState:
        return LatentState(self.a.copy(), None if self.b is None else self.b.copy())

    def check_initial(self) -> float:
        """Log posterior at the starting state; raises NumericalError naming the bad component."""
        theta = self.theta()
        lp = logprior(self.spec, self.priors, theta)
        if not np.isfinite(lp):
            msg = f"{self.fam.value}: log prior is not finite at the initial values {theta.to_dict()}"
            raise NumericalError(msg)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            cond = conditional_terms(self.spec, theta, self.latent(), self.arr)
            lat = latent_terms(self.spec, theta, self.latent(), self.arr)
        for name, terms in cond.items():
            bad = ~np.isfinite(terms)
            if np.any(bad):
                ids = [self.arr.specimen_ids[i] for i in np.flatnonzero(bad)[:5]]
                msg = f"{self.fam.value}: {name} log-likelihood is not finite at initialisation (specimens {ids})"
                raise NumericalError(msg)
        if not np.all(np.isfinite(lat)):
            msg = f"{self.fam.value}: random-effect log density is not finite at initialisation"
            raise NumericalError(msg)
        return logpost(self.spec, self.priors, theta, self.latent(), self.d)

    # -- conjugate pieces -------------------------------------------------

    def _draw_variance(self, shape_extra: float, rate_extra: float) -> float:
        shape = self.priors.gamma_shape + shape_extra
        rate = self.priors.gamma_rate + rate_extra
        precision = self.rng.gamma(shape, 1.0 / rate)
        return 1.0 / max(precision, 1e-300)

    def _draw_coef(self, xtx: np.ndarray, xtz: np.ndarray, noise_var: float) -> np.ndarray:
        prec = xtx / noise_var + self.priors.fixed_precision * np.eye(xtx.shape[0])
        chol = np.linalg.cholesky(prec)
        mean = cho_solve((chol, True), xtz / noise_var)
        return mean + solve_triangular(chol.T, self.rng.standard_normal(mean.size), lower=False)

    def _coef_logprior(self, coef: np.ndarray) -> float:
        return -0.5 * self.priors.fixed_precision * float(coef @ coef)

    def _count_field_ll(self, log_mu: np.ndarray, kappa: float | None = None) -> np.ndarray:
        mu = np.exp(log_mu)
        if self.fam is Family.LVD_NEGBIN:
            return shifted_negbin_logpmf(self.lvd, mu, self.kappa if kappa is None else kappa)
        return shifted_poisson_logpmf(self.lvd, mu)

    # -- sweeps -----------------------------------------------------------

    def sweep(self) -> None:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.fam is Family.JOINT:
                self._sweep_joint()
            elif self.fam.is_count:
                self._sweep_count()
            else:
                self._sweep_gaussian()

    def _sweep_gaussian(self) -> None:
        rng = self.rng
        eta = self.x_field @ self.coef
        if self.fam is Family.PLA_LMM:
            resid = self.y - eta
            prec_a = self.fields_per_specimen / self.sigma2 + 1.0 / self.tau2
            mean_a = np.bincount(self.idx, weights=resid, minlength=self.m) / self.sigma2 / prec_a
            self.a = mean_a + rng.standard_normal(self.m) / np.sqrt(prec_a)
            self.coef = self._draw_coef(self.xtx_field, self.x_field.T @ (self.y - self.a[self.idx]), self.sigma2)
            resid = self.y - self.x_field @ self.coef - self.a[self.idx]
            self.sigma2 = self._draw_variance(0.5 * self.n_fields, 0.5 * float(resid @ resid))
        else:
            s = np.bincount(self.vf, weights=self.y - eta[self.vf], minlength=self.n_fields)
            mult = self._multiplier()
            c = self.nu2 * mult
            big_d = self.sigma2 + self.n_f * c
            u = np.bincount(self.idx, weights=self.n_f / big_d, minlength=self.m)
            w = np.bincount(self.idx, weights=s / big_d, minlength=self.m)
            prec_a = 1.0 / self.tau2 + u
            self.a = w / prec_a + rng.standard_normal(self.m) / np.sqrt(prec_a)
            prec_b = self.n_f / self.sigma2 + 1.0 / c
            self.b = (s - self.n_f * self.a[self.idx]) / self.sigma2 / prec_b + rng.standard_normal(
                self.n_fields
            ) / np.sqrt(prec_b)
            z = self.y - self.a[self.vs] - self.b[self.vf]
            xtz = self.x_field.T @ np.bincount(self.vf, weights=z, minlength=self.n_fields)
            self.coef = self._draw_coef(self.xtx_vessel, xtz, self.sigma2)
            resid = z - (self.x_field @ self.coef)[self.vf]
            self.sigma2 = self._draw_variance(0.5 * resid.size, 0.5 * float(resid @ resid))
            b2 = self.b * self.b
            self.nu2 = self._draw_variance(0.5 * self.n_fields, 0.5 * float(np.sum(b2 / mult)))
            if self.has_delta:
                for g in np.flatnonzero(self.delta_free):
                    sel = self.mult_level == g
                    self.delta[g] = self._draw_variance(0.5 * int(sel.sum()), 0.5 * float(np.sum(b2[sel])) / self.nu2)
        self.tau2 = self._draw_variance(0.5 * self.m, 0.5 * float(self.a @ self.a))
        self._shift_univariate()

    def _multiplier(self) -> np.ndarray:
        if not self.has_delta:
            return np.ones(self.n_fields)
        return np.concatenate([self.delta, [1.0]])[self.mult_level]

    def _shift_univariate(self) -> None:
        walk = self.walks["shift"]
        c = float(walk.propose(self.rng, np.zeros(1))[0])
        a_new = self.a - c
        alpha_new = self.coef[0] + c
        log_ratio = -0.5 * (float(a_new @ a_new) - float(self.a @ self.a)) / self.tau2
        log_ratio -= 0.5 * self.priors.fixed_precision * (alpha_new**2 - self.coef[0] ** 2)
        accepted = metropolis_accept(self.rng, log_ratio)
        if accepted:
            self.a = a_new
            self.coef = self.coef.copy()
            self.coef[0] = alpha_new
        walk.record(accepted, np.zeros(1))

    def _sweep_count(self) -> None:
        rng = self.rng
        eta = self.x_field @ self.coef

        def specimen_lp(a: np.ndarray) -> np.ndarray:
            ll = np.bincount(self.idx, weights=self._count_field_ll(eta + a[self.idx]), minlength=self.m)
            return ll - 0.5 * a * a / self.tau2

        walk_a = self.walks["a"]
        prop = walk_a.propose(rng, self.a)
        accepted = metropolis_accept(rng, specimen_lp(prop) - specimen_lp(self.a))
        self.a = np.where(accepted, prop, self.a)
        walk_a.record(accepted)

        offset = self.a[self.idx]

        def coef_lp(coef: np.ndarray) -> float:
            return math.fsum(self._count_field_ll(self.x_field @ coef + offset)) + self._coef_logprior(coef)

        self.coef, _ = self.walks["coef"].step(rng, self.coef, coef_lp, coef_lp(self.coef))
        self.tau2 = self._draw_variance(0.5 * self.m, 0.5 * float(self.a @ self.a))

        if self.fam is Family.LVD_NEGBIN:
            log_mu = self.x_field @ self.coef + offset
            priors = self.priors

            def dispersion_lp(log_kappa: np.ndarray) -> float:
                kappa = float(math.exp(log_kappa[0]))
                if not np.isfinite(kappa) or kappa <= 0.0:
                    return -math.inf
                return (
                    math.fsum(self._count_field_ll(log_mu, kappa))
                    + float(_gamma_logpdf(kappa, priors.gamma_shape, priors.gamma_rate))
                    + float(log_kappa[0])
                )

            x = np.array([math.log(self.kappa)])
            x, _ = self.walks["dispersion"].step(rng, x, dispersion_lp, dispersion_lp(x))
            self.kappa = float(math.exp(x[0]))
        self._shift_univariate()

    def _latent_joint(self, a: np.ndarray, rho: float | None = None) -> float:
        rho = self.rho if rho is None else rho
        return -0.5 * float(np.sum(_bivariate_quad(a, rho))) - 0.5 * self.m * math.log(1.0 - rho * rho)

    def _sweep_joint(self) -> None:
        rng = self.rng
        eta_a = self.x_field @ self.coef
        eta_n = self.x_field @ self.coef_n

        # (a^A, a^N) with field effects integrated out
        r0 = self.y - eta_a[self.vf]
        s0 = np.bincount(self.vf, weights=r0, minlength=self.n_fields)
        big_d = self.sigma2 + self.n_f * self.nu2
        coef_b = np.bincount(self.idx, weights=-2.0 * self.lam_a * s0 / big_d, minlength=self.m)
        coef_c = np.bincount(self.idx, weights=self.n_f * self.lam_a**2 / big_d, minlength=self.m)

        def specimen_lp(a: np.ndarray) -> np.ndarray:
            count = np.bincount(
                self.idx, weights=shifted_poisson_logpmf(self.lvd, np.exp(eta_n + self.lam_n * a[self.idx, 1])),
                minlength=self.m,
            )
            return -0.5 * (coef_b * a[:, 0] + coef_c * a[:, 0] ** 2) + count - 0.5 * _bivariate_quad(a, self.rho)

        walk_a = self.walks["a"]
        prop = walk_a.propose(rng, self.a)
        accepted = metropolis_accept(rng, specimen_lp(prop) - specimen_lp(self.a))
        self.a = np.where(accepted[:, None], prop, self.a)
        walk_a.record(accepted)

        s = s0 - self.n_f * self.lam_a * self.a[self.idx, 0]
        prec_b = self.n_f / self.sigma2 + 1.0 / self.nu2
        self.b = s / self.sigma2 / prec_b + rng.standard_normal(self.n_fields) / np.sqrt(prec_b)

        # vessel fixed effects and loading
        z = self.y - self.lam_a * self.a[self.vs, 0] - self.b[self.vf]
        xtz = self.x_field.T @ np.bincount(self.vf, weights=z, minlength=self.n_fields)
        self.coef = self._draw_coef(self.xtx_vessel, xtz, self.sigma2)
        eta_a = self.x_field @ self.coef
        r1 = self.y - eta_a[self.vf] - self.b[self.vf]
        xa = self.a[self.vs, 0]
        sxy = float(r1 @ xa)
        sxx = float(xa @ xa)
        block_a = self.layout.block("lambda_a")

        def lambda_a_lp(u: np.ndarray) -> float:
            lam = float(block_a.from_unconstrained(u)[0])
            return -(lam * lam * sxx - 2.0 * lam * sxy) / (2.0 * self.sigma2) + block_a.log_jacobian(u)

        u = block_a.to_unconstrained(np.array([self.lam_a]))
        u, _ = self.walks["lambda_a"].step(rng, u, lambda_a_lp, lambda_a_lp(u))
        self.lam_a = float(block_a.from_unconstrained(u)[0])

        # LVD fixed effects and loading
        a_n = self.a[self.idx, 1]

        def coef_n_lp(coef: np.ndarray) -> float:
            log_mu = self.x_field @ coef + self.lam_n * a_n
            return math.fsum(shifted_poisson_logpmf(self.lvd, np.exp(log_mu))) + self._coef_logprior(coef)

        self.coef_n, _ = self.walks["coef_n"].step(rng, self.coef_n, coef_n_lp, coef_n_lp(self.coef_n))
        eta_n = self.x_field @ self.coef_n
        block_n = self.layout.block("lambda_n")

        def lambda_n_lp(u: np.ndarray) -> float:
            lam = float(block_n.from_unconstrained(u)[0])
            return math.fsum(shifted_poisson_logpmf(self.lvd, np.exp(eta_n + lam * a_n))) + block_n.log_jacobian(u)

        u = block_n.to_unconstrained(np.array([self.lam_n]))
        u, _ = self.walks["lambda_n"].step(rng, u, lambda_n_lp, lambda_n_lp(u))
        self.lam_n = float(block_n.from_unconstrained(u)[0])

        if "rho" in self.walks:
            block_r = self.layout.block("rho")

            def rho_lp(u: np.ndarray) -> float:
                rho = float(block_r.from_unconstrained(u)[0])
                return self._latent_joint(self.a, rho) + block_r.log_jacobian(u)

            u = block_r.to_unconstrained(np.array([self.rho]))
            u, _ = self.walks["rho"].step(rng, u, rho_lp, rho_lp(u))
            self.rho = float(block_r.from_unconstrained(u)[0])

        resid = r1 - self.lam_a * xa
        self.sigma2 = self._draw_variance(0.5 * resid.size, 0.5 * float(resid @ resid))
        self.nu2 = self._draw_variance(0.5 * self.n_fields, 0.5 * float(self.b @ self.b))

        self._scale_joint(0, "lambda_a", "scale_a")
        self._scale_joint(1, "lambda_n", "scale_n")
        self._shift_joint(0, "lambda_a", "shift_a")
        self._shift_joint(1, "lambda_n", "shift_n")

    def _scale_joint(self, column: int, lam_name: str, walk_name: str) -> None:
        walk = self.walks[walk_name]
        s = float(walk.propose(self.rng, np.zeros(1))[0])
        lam = getattr(self, "lam_a" if column == 0 else "lam_n")
        lam_new = lam * math.exp(s)
        block = self.layout.block(lam_name)
        if not block.lower < lam_new < block.upper:
            walk.record(False, np.zeros(1))
            return
        a_new = self.a.copy()
        a_new[:, column] *= math.exp(-s)
        log_ratio = self._latent_joint(a_new) - self._latent_joint(self.a) + (1 - self.m) * s
        accepted = metropolis_accept(self.rng, log_ratio)
        if accepted:
            self.a = a_new
            setattr(self, "lam_a" if column == 0 else "lam_n", lam_new)
        walk.record(accepted, np.zeros(1))

    def _shift_joint(self, column: int, lam_name: str, walk_name: str) -> None:
        walk = self.walks[walk_name]
        lam = self.lam_a if column == 0 else self.lam_n
        if lam == 0.0:
            return
        c = float(walk.propose(self.rng, np.zeros(1))[0])
        coef = self.coef if column == 0 else self.coef_n
        a_new = self.a.copy()
        a_new[:, column] -= c / lam
        alpha_new = coef[0] + c
        log_ratio = self._latent_joint(a_new) - self._latent_joint(self.a)
        log_ratio -= 0.5 * self.priors.fixed_precision * (alpha_new**2 - coef[0] ** 2)
        accepted = metropolis_accept(self.rng, log_ratio)
        if accepted:
            self.a = a_new
            coef = coef.copy()
            coef[0] = alpha_new
            if column == 0:
                self.coef = coef
            else:
                self.coef_n = coef
        walk.record(accepted, np.zeros(1))

    def freeze(self) -> None:
        for walk in self.walks.values():
            walk.freeze()

    def acceptance(self) -> dict[str, float]:
        return {name: walk.acceptance_rate for name, walk in self.walks.items()}


@dataclass(frozen=True)
class _ChainOutput:
    draws: np.ndarray
    logpost: np.ndarray
    acceptance: dict[str, float]
    fixed: tuple[str, ...]


def _start_values(
    spec: ModelSpec, priors: PriorSpec, d: Dataset, theta0: ParamVector, jitter: float, rng
) -> ParamVector:
    mask = free_mask(spec, d.arrays, priors)
    if jitter == 0.0 and mask.all():
        return theta0
    layout = spec.layout(priors)
    u = layout.to_unconstrained(theta0)
    # absent levels stay at β = 0, δ = 1
    u[~mask] = 0.0
    if jitter != 0.0:
        u[mask] += jitter * rng.standard_normal(int(mask.sum()))
    return layout.from_unconstrained(u)


def _run_chain(
    spec: ModelSpec,
    priors: PriorSpec,
    d: Dataset,
    config: ChainConfig,
    theta0: ParamVector,
    chain: int,
    seed_seq: np.random.SeedSequence,
) -> _ChainOutput:
    rng = np.random.default_rng(seed_seq)
    start = _start_values(spec, priors, d, theta0, config.init_jitter if chain > 0 else 0.0, rng)
    sampler = _ChainSampler(spec, priors, d, config, start, rng)
    lp0 = sampler.check_initial()
    layout = sampler.layout

    def record() -> tuple[np.ndarray, float]:
        theta = sampler.theta()
        lp = logpost(spec, priors, theta, sampler.latent(), d)
        return layout.pack(orient_signs(spec, theta)), lp

    if config.keep_iterations == 0:
        draw, _ = record()
        return _ChainOutput(draw[None, :], np.array([lp0]), sampler.acceptance(), sampler.fixed)

    logger.info("chain %d of %s: %d burn-in iterations", chain, spec.family.value, config.burn_in)
    for _ in range(config.burn_in):
        sampler.sweep()
    sampler.freeze()
    draws = np.empty((config.n_kept, layout.size))
    lps = np.empty(config.n_kept)
    k = 0
    for it in range(config.keep_iterations):
        sampler.sweep()
        if (it + 1) % config.thin == 0 and k < config.n_kept:
            draws[k], lps[k] = record()
            k += 1
    acceptance = sampler.acceptance()
    logger.info(
        "chain %d of %s done; acceptance %s",
        chain,
        spec.family.value,
        ", ".join(f"{k}={v:.2f}" for k, v in acceptance.items()),
    )
    return _ChainOutput(draws, lps, acceptance, sampler.fixed)


@dataclass(frozen=True)
class ChainResult:
    """Kept draws of all chains, on the natural scale.

    ``draws`` has shape (n_chains, n_kept, n_params) with columns named by
    ``names``; JOINT draws are oriented to λ^A ≥ 0 and λ^N ≤ 0. Parameters
    held fixed because their tissue level is absent are listed in ``fixed``.
    ``initial_only`` marks a run with no kept iterations, whose single
    "draw" per chain is the initial state.
    """

    spec: ModelSpec
    priors: PriorSpec
    config: ChainConfig
    names: tuple[str, ...]
    draws: np.ndarray
    logpost: np.ndarray
    acceptance: dict[str, np.ndarray]
    fixed: tuple[str, ...] = ()
    initial_only: bool = False

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    def param(self, name: str) -> np.ndarray:
        """Draws of one parameter, shape (n_chains, n_kept)."""
        try:
            return self.draws[:, :, self.names.index(name)]
        except ValueError:
            msg = f"no parameter {name!r} in this chain result"
            raise KeyError(msg) from None

    def theta(self, chain: int, k: int) -> ParamVector:
        return self.spec.layout(self.priors).unpack(self.draws[chain, k])

    @cached_property
    def ess(self) -> dict[str, float]:
        return {n: ess(self.param(n)) for n in self.names}

    @cached_property
    def rhat(self) -> dict[str, float]:
        return {n: split_rhat(self.param(n)) for n in self.names}

    def autocorrelations(self, max_lag: int = 50) -> dict[str, np.ndarray]:
        return {n: autocorrelation(self.param(n), max_lag) for n in self.names}

    def to_frame(self) -> pd.DataFrame:
        """One row per kept iteration per chain."""
        chains, kept, _ = self.draws.shape
        frame = pd.DataFrame(self.draws.reshape(chains * kept, -1), columns=list(self.names))
        frame.insert(0, "iteration", np.tile(np.arange(kept), chains))
        frame.insert(0, "chain", np.repeat(np.arange(chains), kept))
        frame["logpost"] = self.logpost.reshape(-1)
        return frame


def run_mcmc(
    spec: ModelSpec,
    priors: PriorSpec,
    d: Dataset,
    config: ChainConfig,
    init: ParamVector | None = None,
    n_jobs: int = 1,
) -> ChainResult:
    """Sample the posterior of ``spec`` given ``d``.

    :param spec: Model specification.
    :param priors: Prior hyperparameters.
    :param d: Nonempty dataset.
    :param config: Chain settings.
    :param init: Starting values (moment-based if omitted); chains after the
        first start from jittered copies.
    :param n_jobs: Workers for running chains (results do not depend on it).
    :raises NumericalError: if the log posterior is not finite at a chain's start.
    """
    if d.n_specimens == 0:
        msg = "cannot sample from an empty dataset"
        raise ModelSpecError(msg)
    theta0 = init if init is not None else initial_params(spec, d)
    theta0.validate(spec, priors)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    logger.info(
        "MCMC for %s: %d chain(s), burn-in %d, keep %d, thin %d",
        spec.family.value,
        config.n_chains,
        config.burn_in,
        config.keep_iterations,
        config.thin,
    )
    if n_jobs == 1:
        outputs = [_run_chain(spec, priors, d, config, theta0, c, s) for c, s in enumerate(seeds)]
    else:
        outputs = Parallel(n_jobs=n_jobs)(
            delayed(_run_chain)(spec, priors, d, config, theta0, c, s) for c, s in enumerate(seeds)
        )
    acceptance = {name: np.array([o.acceptance[name] for o in outputs]) for name in outputs[0].acceptance}
    return ChainResult(
        spec=spec,
        priors=priors,
        config=config,
        names=spec.layout(priors).names,
        draws=np.stack([o.draws for o in outputs]),
        logpost=np.stack([o.logpost for o in outputs]),
        acceptance=acceptance,
        fixed=outputs[0].fixed,
        initial_only=config.keep_iterations == 0,
    )


@dataclass(frozen=True)
class PairedFit:
    """JOINT fitted with free ρ and with ρ ≡ 0.

    ``differences`` holds joint minus independent posterior medians and
    ``mc_se`` the Monte-Carlo SE of that difference.
    """

    joint: FitResult
    independent: FitResult
    differences: dict[str, float]
    mc_se: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "joint": self.joint.to_dict(),
            "independent": self.independent.to_dict(),
            "differences": self.differences,
            "mc_se": self.mc_se,
        }


def fit_joint_and_independent(
    d: Dataset,
    priors: PriorSpec = DEFAULT_PRIORS,
    config: ChainConfig | None = None,
    grouping: Grouping = Grouping.COARSE,
    n_jobs: int = 1,
) -> PairedFit:
    """Fit JOINT and JOINT with ρ ≡ 0 under identical seeds and settings."""
    config = config or ChainConfig()
    general = ModelSpec(Family.JOINT, grouping)
    constrained = general.with_constraint(Constraint.RHO_ZERO)
    joint = summarize_posterior(run_mcmc(general, priors, d, config, n_jobs=n_jobs))
    independent = summarize_posterior(run_mcmc(constrained, priors, d, config, n_jobs=n_jobs))
    differences = {}
    mc_se = {}
    for name, row in independent.rows.items():
        other = joint.rows[name]
        differences[name] = other.median - row.median
        mc_se[name] = math.hypot(other.mc_se, row.mc_se)
    return PairedFit(joint, independent, differences, mc_se)


@dataclass(frozen=True)
class SensitivityReport:
    """Posterior medians under scaled prior hyperparameters."""

    base: FitResult
    scaled: dict[float, FitResult] = field(default_factory=dict)

    def shifts(self, factor: float) -> dict[str, float]:
        """Median under ``factor``-scaled priors minus the base median."""
        other = self.scaled[factor]
        return {name: other.rows[name].median - row.median for name, row in self.base.rows.items()}

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "shifts": {str(f): self.shifts(f) for f in self.scaled},
        }


def prior_sensitivity(
    spec: ModelSpec,
    d: Dataset,
    config: ChainConfig | None = None,
    priors: PriorSpec = DEFAULT_PRIORS,
    factors: tuple[float, ...] = (10.0, 0.1),
    n_jobs: int = 1,
) -> SensitivityReport:
    """Refit with every prior hyperparameter scaled by each of ``factors``."""
    config = config or ChainConfig()
    base = summarize_posterior(run_mcmc(spec, priors, d, config, n_jobs=n_jobs))
    scaled = {}
    for factor in factors:
        logger.info("prior sensitivity: hyperparameters x %g", factor)
        scaled[factor] = summarize_posterior(run_mcmc(spec, priors.scaled(factor), d, config, n_jobs=n_jobs))
    return SensitivityReport(base, scaled)
