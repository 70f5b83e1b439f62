"""Module for parameter-recovery studies: repeated simulate-then-fit on known truths."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import kstest

from clustersize.constraint import Family
from clustersize.diagnostics import diagnose, summarize_posterior
from clustersize.errors import ModelSpecError
from clustersize.mcmc import ChainConfig, run_mcmc
from clustersize.mlfit import MLOptions, delta_equality_lrt, fit_ml
from clustersize.model import orient_signs
from clustersize.params import DEFAULT_PRIORS, ModelSpec, PriorSpec
from clustersize.simulate import DesignPreset, TrueParams, simulate_dataset

logger = logging.getLogger(__name__)

METHODS = ("ml", "mcmc")


@dataclass(frozen=True)
class RecoveryOptions:
    """Settings of :func:`run_recovery`.

    :param method: ``"ml"`` (Wald intervals) or ``"mcmc"`` (95% credible intervals).
    :param n_replicates: Simulated datasets.
    :param seed: Base seed; replicate ``r`` uses ``SeedSequence(seed).spawn(n_replicates)[r]``.
    :param chains: Chain settings for MCMC fits; the seed is replaced per replicate.
    :param ml: Options for ML fits, including the conditional contrast fit.
    :param priors: Priors of MCMC fits.
    :param contrast: For JOINT truths, also fit VA_CONDITIONAL by ML on every replicate.
    """

    method: str = "mcmc"
    n_replicates: int = 2
    seed: int = 1
    chains: ChainConfig = field(default_factory=ChainConfig.desk)
    ml: MLOptions = field(default_factory=MLOptions)
    priors: PriorSpec = DEFAULT_PRIORS
    contrast: bool = True

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            msg = f"method must be one of {', '.join(METHODS)}, got {self.method!r}"
            raise ValueError(msg)
        if self.n_replicates < 1:
            msg = f"n_replicates must be positive, got {self.n_replicates}"
            raise ValueError(msg)


@dataclass(frozen=True)
class _ReplicateOutput:
    rows: list[dict]
    contrast: dict | None
    converged: bool


def _replicate_seeds(ss: np.random.SeedSequence) -> tuple[int, int]:
    data_seed, chain_seed = ss.generate_state(2)
    return int(data_seed), int(chain_seed)


def _fit_replicate(
    r: int, ss: np.random.SeedSequence, truth: TrueParams, design: DesignPreset, opts: RecoveryOptions
) -> _ReplicateOutput:
    spec = truth.spec
    data_seed, chain_seed = _replicate_seeds(ss)
    d = simulate_dataset(spec, truth, design, data_seed)
    layout = spec.layout(opts.priors)
    true_values = dict(zip(layout.names, layout.pack(orient_signs(spec, truth.theta)).tolist()))

    if opts.method == "ml":
        fit = fit_ml(spec, d, opts=opts.ml)
        estimates = fit.estimates()
        intervals = fit.intervals
        fixed = set(fit.fixed)
        converged = fit.converged
    else:
        chains = run_mcmc(spec, opts.priors, d, replace(opts.chains, seed=chain_seed))
        summary = summarize_posterior(chains)
        estimates = {name: row.median for name, row in summary.rows.items()}
        intervals = {name: (row.lower, row.upper) for name, row in summary.rows.items()}
        fixed = set(chains.fixed)
        converged = diagnose(chains).ok

    rows = []
    for name, value in true_values.items():
        if name in fixed:
            continue
        lower, upper = intervals.get(name, (math.nan, math.nan))
        covered = math.nan if math.isnan(lower) or math.isnan(upper) else float(lower <= value <= upper)
        rows.append(
            {
                "replicate": r,
                "parameter": name,
                "truth": value,
                "estimate": estimates[name],
                "lower": lower,
                "upper": upper,
                "covered": covered,
            }
        )

    contrast = None
    if opts.contrast and spec.family is Family.JOINT:
        conditional = fit_ml(ModelSpec(Family.VA_CONDITIONAL, spec.grouping), d, opts=opts.ml)
        cond_estimates = conditional.estimates()
        gamma_lower, gamma_upper = conditional.intervals.get("gamma", (math.nan, math.nan))
        contrast = {
            "replicate": r,
            "gamma_hat": cond_estimates["gamma"],
            "gamma_se": conditional.standard_errors.get("gamma", math.nan),
            "gamma_lower": gamma_lower,
            "gamma_upper": gamma_upper,
            "conditional_converged": conditional.converged,
        }
        for level in spec.grouping.effect_levels:
            contrast[f"beta_joint[{level}]"] = estimates[f"beta_a[{level}]"]
            contrast[f"beta_conditional[{level}]"] = cond_estimates[f"beta[{level}]"]
    logger.info("replicate %d done (converged: %s)", r, converged)
    return _ReplicateOutput(rows, contrast, converged)


@dataclass(frozen=True)
class RecoveryReport:
    """Per-replicate estimates and their summary against the generating values.

    ``replicates`` has one row per replicate and parameter; ``covered`` is NaN
    when the replicate produced no interval for that parameter. ``contrast``
    holds one row per replicate for JOINT truths (None otherwise).
    """

    spec: ModelSpec
    method: str
    replicates: pd.DataFrame
    contrast: pd.DataFrame | None
    n_converged: int

    @property
    def n_replicates(self) -> int:
        return int(self.replicates["replicate"].nunique())

    def summary(self) -> pd.DataFrame:
        """Bias, RMSE and interval coverage per parameter, in layout order."""
        frame = self.replicates.assign(
            error=self.replicates["estimate"] - self.replicates["truth"],
        )
        frame = frame.assign(squared=frame["error"] ** 2)
        out = frame.groupby("parameter", sort=False).agg(
            truth=("truth", "first"),
            mean_estimate=("estimate", "mean"),
            bias=("error", "mean"),
            mse=("squared", "mean"),
            coverage=("covered", "mean"),
            n=("estimate", "size"),
        )
        out["rmse"] = np.sqrt(out.pop("mse"))
        return out.reset_index()[["parameter", "truth", "mean_estimate", "bias", "rmse", "coverage", "n"]]

    def contrast_summary(self) -> dict:
        """Sign consistency of γ̂ and mean joint-minus-conditional β differences."""
        if self.contrast is None or self.contrast.empty:
            return {}
        out = {
            "gamma_positive_fraction": float((self.contrast["gamma_hat"] > 0.0).mean()),
            "gamma_mean": float(self.contrast["gamma_hat"].mean()),
        }
        for level in self.spec.grouping.effect_levels:
            diff = self.contrast[f"beta_joint[{level}]"] - self.contrast[f"beta_conditional[{level}]"]
            out[f"beta_difference[{level}]"] = float(diff.mean())
        return out

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.describe(),
            "method": self.method,
            "n_replicates": self.n_replicates,
            "n_converged": self.n_converged,
            "summary": self.summary().to_dict(orient="records"),
            "contrast": self.contrast_summary(),
        }


def run_recovery(
    truth: TrueParams, design: DesignPreset, opts: RecoveryOptions | None = None, n_jobs: int = 1
) -> RecoveryReport:
    """Simulate ``opts.n_replicates`` datasets from ``truth`` and refit each.

    Replicates are independent, so they run concurrently; output order is by
    replicate index whatever ``n_jobs`` is.
    """
    opts = opts or RecoveryOptions()
    truth.validate()
    seeds = np.random.SeedSequence(opts.seed).spawn(opts.n_replicates)
    logger.info(
        "recovery study: %s by %s, %d replicate(s) on design %s",
        truth.spec.family.value,
        opts.method,
        opts.n_replicates,
        design.name,
    )
    if n_jobs == 1:
        outputs = [_fit_replicate(r, ss, truth, design, opts) for r, ss in enumerate(seeds)]
    else:
        outputs = Parallel(n_jobs=n_jobs)(
            delayed(_fit_replicate)(r, ss, truth, design, opts) for r, ss in enumerate(seeds)
        )
    replicates = pd.DataFrame([row for o in outputs for row in o.rows])
    contrast_rows = [o.contrast for o in outputs if o.contrast is not None]
    contrast = pd.DataFrame(contrast_rows) if contrast_rows else None
    n_converged = sum(o.converged for o in outputs)
    if n_converged < len(outputs):
        logger.warning("%d of %d replicate fits did not converge", len(outputs) - n_converged, len(outputs))
    return RecoveryReport(truth.spec, opts.method, replicates, contrast, n_converged)


@dataclass(frozen=True)
class CalibrationReport:
    """p-values of the δ-equality LRT over replicates simulated from one truth.

    ``ks_pvalue`` tests the p-values for uniformity, which they should pass
    when the truth has all δ equal to 1.
    """

    p_values: np.ndarray
    alpha: float

    @property
    def rejection_rate(self) -> float:
        return float(np.mean(self.p_values < self.alpha))

    @property
    def ks_pvalue(self) -> float:
        return float(kstest(self.p_values, "uniform").pvalue)

    def to_dict(self) -> dict:
        return {
            "n_replicates": int(self.p_values.size),
            "alpha": self.alpha,
            "rejection_rate": self.rejection_rate,
            "ks_pvalue": self.ks_pvalue,
        }


def _delta_lrt_pvalue(ss: np.random.SeedSequence, truth: TrueParams, design: DesignPreset, opts: MLOptions) -> float:
    d = simulate_dataset(truth.spec, truth, design, int(ss.generate_state(1)[0]))
    return delta_equality_lrt(d, truth.spec.grouping, opts).p_value


def lrt_calibration(
    truth: TrueParams,
    design: DesignPreset,
    n_replicates: int,
    seed: int = 1,
    alpha: float = 0.05,
    opts: MLOptions | None = None,
    n_jobs: int = 1,
) -> CalibrationReport:
    """Repeat the δ-equality LRT on datasets simulated from a CIRC_HET ``truth``.

    :raises ModelSpecError: if ``truth`` is not a circularity model.
    """
    if truth.spec.family is not Family.CIRC_HET:
        msg = f"LRT calibration needs a circ_het truth, got {truth.spec.family.value}"
        raise ModelSpecError(msg)
    if n_replicates < 1:
        msg = f"n_replicates must be positive, got {n_replicates}"
        raise ValueError(msg)
    truth.validate()
    opts = opts or MLOptions(compute_se=False)
    seeds = np.random.SeedSequence(seed).spawn(n_replicates)
    logger.info("delta LRT calibration: %d replicate(s) on design %s", n_replicates, design.name)
    if n_jobs == 1:
        p_values = [_delta_lrt_pvalue(ss, truth, design, opts) for ss in seeds]
    else:
        p_values = Parallel(n_jobs=n_jobs)(delayed(_delta_lrt_pvalue)(ss, truth, design, opts) for ss in seeds)
    return CalibrationReport(np.asarray(p_values, dtype=float), alpha)
