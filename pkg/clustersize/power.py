"""Module for one-way ANOVA power and sample-size calculations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import f, f_oneway, ncf

from clustersize.simulate import simulate_power_scenario

logger = logging.getLogger(__name__)

MAX_N_PER_GROUP = 100_000


@dataclass(frozen=True)
class PowerScenario:
    """Design of a one-way comparison of group means.

    :param group_means: Hypothesised group means (at least two).
    :param within_sd: Common within-group SD, positive.
    :param n_per_group: Observations per group (at least 2 to compute power).
    :param alpha: Significance level.
    """

    group_means: tuple[float, ...]
    within_sd: float
    n_per_group: int = 2
    alpha: float = 0.05

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_means", tuple(float(x) for x in self.group_means))
        if len(self.group_means) < 2:
            msg = "need at least two group means"
            raise ValueError(msg)
        if not (np.isfinite(self.within_sd) and self.within_sd > 0.0):
            msg = f"within_sd must be positive, got {self.within_sd}"
            raise ValueError(msg)
        if not 0.0 < self.alpha < 1.0:
            msg = f"alpha must lie in (0, 1), got {self.alpha}"
            raise ValueError(msg)

    @property
    def k(self) -> int:
        return len(self.group_means)

    def with_n(self, n_per_group: int) -> PowerScenario:
        return replace(self, n_per_group=n_per_group)

    def to_dict(self) -> dict:
        return {
            "group_means": list(self.group_means),
            "within_sd": self.within_sd,
            "n_per_group": self.n_per_group,
            "alpha": self.alpha,
        }


def difference_parameter(s: PowerScenario) -> float:
    """SD of the group means (divisor k - 1) over the within-group SD."""
    return float(np.std(s.group_means, ddof=1)) / s.within_sd


def noncentrality(s: PowerScenario) -> float:
    means = np.asarray(s.group_means)
    return s.n_per_group * float(np.sum((means - means.mean()) ** 2)) / s.within_sd**2


def noncentral_f_sf(x: float, dfn: float, dfd: float, nc: float) -> float:
    """Upper tail of the noncentral F; the central F when ``nc`` is 0."""
    if nc < 0.0:
        msg = f"noncentrality must be nonnegative, got {nc}"
        raise ValueError(msg)
    if nc == 0.0:
        return float(f.sf(x, dfn, dfd))
    return float(ncf.sf(x, dfn, dfd, nc))


def anova_power(s: PowerScenario) -> float:
    """Power of the one-way F test at level ``s.alpha``.

    :raises ValueError: if ``s.n_per_group`` < 2.
    """
    if s.n_per_group < 2:
        msg = f"n_per_group must be at least 2, got {s.n_per_group}"
        raise ValueError(msg)
    dfn = s.k - 1
    dfd = s.k * (s.n_per_group - 1)
    critical = float(f.isf(s.alpha, dfn, dfd))
    return noncentral_f_sf(critical, dfn, dfd, noncentrality(s))


def required_n(s: PowerScenario, target_power: float) -> int:
    """Smallest n_per_group whose power reaches ``target_power``.

    :raises ValueError: if the target is not in (0, 1) or is unreachable.
    """
    if not 0.0 < target_power < 1.0:
        msg = f"target_power must lie in (0, 1), got {target_power}"
        raise ValueError(msg)
    if anova_power(s.with_n(2)) >= target_power:
        return 2
    if anova_power(s.with_n(MAX_N_PER_GROUP)) < target_power:
        msg = f"power {target_power} not reached with up to {MAX_N_PER_GROUP} per group"
        raise ValueError(msg)
    # power is increasing in n, so bisect on the first n that reaches the target
    lo, hi = 2, MAX_N_PER_GROUP
    while lo < hi:
        mid = (lo + hi) // 2
        if anova_power(s.with_n(mid)) >= target_power:
            hi = mid
        else:
            lo = mid + 1
    logger.debug("required n per group: %d", lo)
    return lo


def _replicate_rejects(s: PowerScenario, seed: np.random.SeedSequence) -> bool:
    sample = simulate_power_scenario(s.group_means, s.within_sd, s.n_per_group, seed)
    return bool(f_oneway(*sample.by_group()).pvalue < s.alpha)


def simulated_power(s: PowerScenario, n_reps: int, seed: int = 0, n_jobs: int = 1) -> float:
    """Rejection rate of the F test over ``n_reps`` simulated samples.

    Replicate ``r`` uses ``SeedSequence(seed).spawn(n_reps)[r]``.
    """
    if n_reps < 1:
        msg = f"n_reps must be positive, got {n_reps}"
        raise ValueError(msg)
    seeds = np.random.SeedSequence(seed).spawn(n_reps)
    if n_jobs == 1:
        rejects = [_replicate_rejects(s, ss) for ss in seeds]
    else:
        rejects = Parallel(n_jobs=n_jobs)(delayed(_replicate_rejects)(s, ss) for ss in seeds)
    rate = sum(rejects) / n_reps
    logger.info("simulated power over %d replicates: %.4f (MC SE %.4f)", n_reps, rate, math.sqrt(rate * (1 - rate) / n_reps))
    return rate
