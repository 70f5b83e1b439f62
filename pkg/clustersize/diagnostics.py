"""Module for MCMC convergence diagnostics and posterior summaries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from clustersize.constraint import Family
from clustersize.model import EffectRow, effect_table
from clustersize.params import ModelSpec

if TYPE_CHECKING:
    from clustersize.mcmc import ChainResult

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.01
ESS_THRESHOLD = 400.0


def _as_chains(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :]
    if arr.ndim != 2:
        msg = f"expected draws of shape (n,) or (n_chains, n), got {arr.shape}"
        raise ValueError(msg)
    return arr


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at lags 0..n-1, by FFT."""
    n = x.size
    centred = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centred, size)
    return np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n


def is_degenerate(x: np.ndarray) -> bool:
    """True when every draw is identical."""
    arr = np.asarray(x, dtype=float)
    return bool(arr.size == 0 or np.ptp(arr) == 0.0)


def autocorrelation(x: np.ndarray, max_lag: int = 50) -> np.ndarray:
    """Autocorrelation at lags 1..max_lag, averaged over chains (NaN if degenerate).

    :param x: Draws, shape (n,) or (n_chains, n).
    :param max_lag: Largest lag; truncated to n - 1.
    """
    chains = _as_chains(x)
    n = chains.shape[1]
    lags = min(max_lag, n - 1)
    if lags < 1 or is_degenerate(chains):
        return np.full(max(lags, 0), math.nan)
    acf = []
    for c in chains:
        acov = _autocovariance(c)
        acf.append(acov[1 : lags + 1] / acov[0] if acov[0] > 0.0 else np.full(lags, math.nan))
    return np.nanmean(np.array(acf), axis=0)


def ess(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial positive sequence.

    Chains are combined through the multi-chain autocorrelation estimate, so
    between-chain disagreement lowers the ESS. NaN for degenerate draws or
    fewer than four draws per chain.
    """
    chains = _as_chains(x)
    m, n = chains.shape
    if n < 4 or is_degenerate(chains):
        return math.nan
    acov = np.array([_autocovariance(c) for c in chains])
    within = float(np.mean(acov[:, 0])) * n / (n - 1)
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += float(np.var(chains.mean(axis=1), ddof=1))
    if var_plus <= 0.0:
        return math.nan
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    previous = math.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0.0:
            break
        pair = min(pair, previous)
        total += pair
        previous = pair
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / math.log10(max(m * n, 10))))


def split_rhat(x: np.ndarray) -> float:
    """Potential scale reduction after splitting every chain in half.

    Defined for a single chain too. NaN when draws are degenerate or chains
    are shorter than four draws.
    """
    chains = _as_chains(x)
    n = chains.shape[1]
    half = n // 2
    if half < 2 or is_degenerate(chains):
        return math.nan
    split = np.vstack([chains[:, :half], chains[:, n - half :]])
    within = float(np.mean(np.var(split, axis=1, ddof=1)))
    if within <= 0.0:
        return math.nan
    between = half * float(np.var(split.mean(axis=1), ddof=1))
    var_hat = (half - 1) / half * within + between / half
    return float(math.sqrt(var_hat / within))


@dataclass(frozen=True)
class ParamSummary:
    """Posterior summary of one parameter.

    The interval takes the empirical 2.5% quantile rounded down and the 97.5%
    quantile rounded up to actual draws.
    """

    name: str
    median: float
    lower: float
    upper: float
    mean: float
    sd: float
    ess: float
    rhat: float
    degenerate: bool = False

    @property
    def mc_se(self) -> float:
        """Monte-Carlo SE of the posterior mean (0 for degenerate draws)."""
        if self.degenerate:
            return 0.0
        return self.sd / math.sqrt(self.ess) if self.ess > 0.0 else math.nan

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "lower": self.lower,
            "upper": self.upper,
            "mean": self.mean,
            "sd": self.sd,
            "ess": self.ess,
            "rhat": self.rhat,
            "mc_se": self.mc_se,
            "degenerate": self.degenerate,
        }


def summarize_draws(name: str, x: np.ndarray) -> ParamSummary:
    chains = _as_chains(x)
    flat = chains.ravel()
    return ParamSummary(
        name=name,
        median=float(np.median(flat)),
        lower=float(np.quantile(flat, 0.025, method="lower")),
        upper=float(np.quantile(flat, 0.975, method="higher")),
        mean=float(np.mean(flat)),
        sd=float(np.std(flat, ddof=1)) if flat.size > 1 else math.nan,
        ess=ess(chains),
        rhat=split_rhat(chains),
        degenerate=is_degenerate(flat),
    )


@dataclass(frozen=True)
class PosteriorEffect:
    """Tissue effect at the posterior median with its credible interval on the same scale."""

    effect: EffectRow
    lower: float
    upper: float

    def to_dict(self) -> dict:
        return {
            "outcome": self.effect.outcome,
            "level": self.effect.level,
            "coefficient": self.effect.coefficient,
            "ratio": self.effect.ratio,
            "lower": self.lower,
            "upper": self.upper,
            "phrase": self.effect.phrase,
        }


def _effect_label(spec: ModelSpec, outcome: str, level: str) -> str:
    if spec.family is Family.JOINT:
        return f"beta_n[{level}]" if outcome == "lvd" else f"beta_a[{level}]"
    return f"beta[{level}]"


@dataclass(frozen=True)
class FitResult:
    """Posterior summary of an MCMC fit."""

    spec: ModelSpec
    rows: dict[str, ParamSummary]
    effects: list[PosteriorEffect] = field(default_factory=list)
    logpost_median: float = math.nan
    n_chains: int = 0
    n_kept: int = 0
    acceptance: dict[str, list[float]] = field(default_factory=dict)
    fixed: tuple[str, ...] = ()
    initial_only: bool = False
    method: str = "mcmc"

    def median(self, name: str) -> float:
        return self.rows[name].median

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "spec": self.spec.describe(),
            "parameters": {name: row.to_dict() for name, row in self.rows.items()},
            "effects": [e.to_dict() for e in self.effects],
            "logpost_median": self.logpost_median,
            "n_chains": self.n_chains,
            "n_kept": self.n_kept,
            "acceptance": self.acceptance,
            "fixed": list(self.fixed),
            "initial_only": self.initial_only,
        }


def summarize_posterior(c: ChainResult) -> FitResult:
    """Median, 95% interval, ESS and split R-hat per parameter, plus tissue effects."""
    rows = {name: summarize_draws(name, c.param(name)) for name in c.names}
    layout = c.spec.layout(c.priors)
    medians = layout.unpack(np.array([rows[n].median for n in layout.names]))
    effects = []
    for row in effect_table(medians, c.spec):
        summary = rows[_effect_label(c.spec, row.outcome, row.level)]
        if row.ratio is None:
            effects.append(PosteriorEffect(row, summary.lower, summary.upper))
        else:
            effects.append(PosteriorEffect(row, math.exp(summary.lower), math.exp(summary.upper)))
    return FitResult(
        spec=c.spec,
        rows=rows,
        effects=effects,
        logpost_median=float(np.median(c.logpost)),
        n_chains=c.n_chains,
        n_kept=c.n_kept,
        acceptance={k: v.tolist() for k, v in c.acceptance.items()},
        fixed=c.fixed,
        initial_only=c.initial_only,
    )


@dataclass(frozen=True)
class DiagnosticsReport:
    """Convergence flags and autocorrelation tables of a ChainResult."""

    rhat: dict[str, float]
    ess: dict[str, float]
    autocorrelations: dict[str, np.ndarray]
    rhat_flags: tuple[str, ...]
    ess_flags: tuple[str, ...]
    degenerate: tuple[str, ...]
    acceptance: dict[str, list[float]]
    rhat_threshold: float = RHAT_THRESHOLD
    ess_threshold: float = ESS_THRESHOLD

    @property
    def ok(self) -> bool:
        return not (self.rhat_flags or self.ess_flags)

    def to_text(self, header: dict | None = None) -> str:
        lines = []
        for key, value in (header or {}).items():
            lines.append(f"# {key}: {value}")
        lines.append(f"status: {'OK' if self.ok else 'FLAGGED'}")
        lines.append(f"R-hat > {self.rhat_threshold:g}: {', '.join(self.rhat_flags) or 'none'}")
        lines.append(f"ESS < {self.ess_threshold:g}: {', '.join(self.ess_flags) or 'none'}")
        lines.append(f"degenerate: {', '.join(self.degenerate) or 'none'}")
        lines.append("")
        lines.append("acceptance rates (per chain)")
        for name, rates in self.acceptance.items():
            lines.append(f"  {name:<12} " + " ".join(f"{r:.3f}" for r in rates))
        lines.append("")
        lines.append(f"{'parameter':<20} {'rhat':>8} {'ess':>10}")
        for name in self.rhat:
            lines.append(f"{name:<20} {self.rhat[name]:>8.4f} {self.ess[name]:>10.1f}")
        lines.append("")
        n_lags = max((v.size for v in self.autocorrelations.values()), default=0)
        lines.append("autocorrelation by lag")
        lines.append(f"{'lag':>4} " + " ".join(f"{n:>14}" for n in self.autocorrelations))
        for lag in range(n_lags):
            values = " ".join(f"{v[lag]:>14.4f}" for v in self.autocorrelations.values())
            lines.append(f"{lag + 1:>4} {values}")
        return "\n".join(lines) + "\n"


def diagnose(
    c: ChainResult,
    rhat_threshold: float = RHAT_THRESHOLD,
    ess_threshold: float = ESS_THRESHOLD,
    max_lag: int = 50,
) -> DiagnosticsReport:
    """Flag parameters with R-hat above or ESS below their thresholds.

    Parameters held fixed and degenerate draws are listed separately and are
    not flagged.
    """
    rhat = c.rhat
    ess_values = c.ess
    degenerate = tuple(n for n in c.names if is_degenerate(c.param(n)))
    skip = set(degenerate) | set(c.fixed)
    rhat_flags = tuple(n for n in c.names if n not in skip and not rhat[n] <= rhat_threshold)
    ess_flags = tuple(n for n in c.names if n not in skip and not ess_values[n] >= ess_threshold)
    if rhat_flags or ess_flags:
        logger.warning("convergence flags: R-hat %s; ESS %s", list(rhat_flags), list(ess_flags))
    return DiagnosticsReport(
        rhat=rhat,
        ess=ess_values,
        autocorrelations=c.autocorrelations(max_lag),
        rhat_flags=rhat_flags,
        ess_flags=ess_flags,
        degenerate=degenerate,
        acceptance={k: v.tolist() for k, v in c.acceptance.items()},
        rhat_threshold=rhat_threshold,
        ess_threshold=ess_threshold,
    )
