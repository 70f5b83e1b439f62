"""Module for simulating datasets from each model family with known parameters.

Random numbers for specimen ``i`` come from its own stream,
``SeedSequence(seed, spawn_key=(i,))``, so a dataset is identical whether
specimens are generated sequentially or in parallel.
"""

from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from clustersize.constraint import Constraint, Family
from clustersize.dataset import Dataset, Field, Specimen, Vessel
from clustersize.errors import ModelSpecError, SimulationWarning
from clustersize.params import ModelSpec, ParamVector
from clustersize.tissue import Grouping, TissueType

logger = logging.getLogger(__name__)

# Outcomes a family does not model are drawn from fixed background distributions
# loosely matched to the exploratory summaries of the study.
BACKGROUND_LVD_MU = 4.5
BACKGROUND_LOG_AREA = (6.5, 1.3)
BACKGROUND_LOGIT_CIRC = (0.3, 1.0)
FIELD_AREA_UM2 = 140_000.0


@dataclass(frozen=True)
class SpecimenTemplate:
    """A group of specimens with the same field layout.

    :param label: Group name.
    :param count: Number of specimens.
    :param blocks: ``(tissue, min_fields, max_fields)`` per tissue region; the
        number of fields is drawn uniformly over the inclusive range.
    """

    label: str
    count: int
    blocks: tuple[tuple[TissueType, int, int], ...]

    def __post_init__(self) -> None:
        if self.count < 0:
            msg = f"{self.label}: specimen count must be nonnegative"
            raise ValueError(msg)
        for tissue, lo, hi in self.blocks:
            if not 1 <= lo <= hi:
                msg = f"{self.label}: invalid field range {lo}..{hi} for {tissue.value}"
                raise ValueError(msg)


@dataclass(frozen=True)
class DesignPreset:
    """Study design: how many specimens of each kind and how many fields each."""

    name: str
    templates: tuple[SpecimenTemplate, ...]

    @property
    def n_specimens(self) -> int:
        return sum(t.count for t in self.templates)

    def expand(self) -> list[SpecimenTemplate]:
        """One template per specimen, in generation order."""
        return [t for t in self.templates for _ in range(t.count)]

    @classmethod
    def table1(cls) -> DesignPreset:
        """62 specimens: 21 controls, 21 CIN, 20 invasive carcinoma.

        Of the controls, 20 contribute ectocervix fields (5-10) and 16
        transformation-zone fields (2-9), so 15 contribute both regions.
        """
        ecto = (TissueType.ControlEctocervix, 5, 10)
        tz = (TissueType.ControlTransformationZone, 2, 9)
        return cls(
            "table1",
            (
                SpecimenTemplate("control_both", 15, (ecto, tz)),
                SpecimenTemplate("control_ecto", 5, (ecto,)),
                SpecimenTemplate("control_tz", 1, (tz,)),
                SpecimenTemplate("cin1", 10, ((TissueType.CIN1, 2, 7),)),
                SpecimenTemplate("cin2", 9, ((TissueType.CIN2, 2, 8),)),
                SpecimenTemplate("cin3", 2, ((TissueType.CIN3, 4, 5),)),
                SpecimenTemplate("carcinoma", 20, ((TissueType.InvasiveCarcinoma, 1, 10),)),
            ),
        )

    @classmethod
    def balanced(
        cls, n_specimens: int, n_fields: int, tissues: tuple[TissueType, ...] = (TissueType.ControlEctocervix,)
    ) -> DesignPreset:
        """``n_specimens`` per tissue code, each with exactly ``n_fields`` fields."""
        return cls(
            f"balanced_{n_specimens}x{n_fields}",
            tuple(SpecimenTemplate(t.value.lower(), n_specimens, ((t, n_fields, n_fields),)) for t in tissues),
        )

    @classmethod
    def named(cls, name: str) -> DesignPreset:
        """``"table1"``, or ``"balanced_<specimens>x<fields>"`` over all six tissue codes."""
        if name == "table1":
            return cls.table1()
        match = re.fullmatch(r"balanced_(\d+)x(\d+)", name)
        if match and int(match[1]) > 0 and int(match[2]) > 0:
            return cls.balanced(int(match[1]), int(match[2]), tuple(TissueType))
        msg = f"unknown design preset {name!r} (expected table1 or balanced_<specimens>x<fields>)"
        raise ValueError(msg)


@dataclass(frozen=True)
class TrueParams:
    """Generating parameters.

    :param spec: Generating model.
    :param theta: Parameters of ``spec``.
    :param pla: Optional parameters of the %LA model, simulated independently.
    """

    spec: ModelSpec
    theta: ParamVector
    pla: ParamVector | None = None

    def validate(self) -> None:
        self.theta.validate(self.spec)
        if self.pla is not None:
            self.pla.validate(ModelSpec(Family.PLA_LMM, self.spec.grouping))

    def to_dict(self) -> dict:
        out = {"spec": self.spec.describe(), "theta": self.theta.to_dict()}
        if self.pla is not None:
            out["pla"] = self.pla.to_dict()
        return out


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def _open_unit(x: float) -> float:
    """Round to 6 significant digits without leaving (0, 1)."""
    y = _sig6(x)
    return min(max(y, 1e-6), 1.0 - 1e-6)


@dataclass(frozen=True)
class _SpecimenDraw:
    specimen: Specimen
    clipped_pla: int


def _simulate_specimen(index: int, template: SpecimenTemplate, truth: TrueParams, seed: int, width: int) -> _SpecimenDraw:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    spec, theta = truth.spec, truth.theta
    fam = spec.family
    grouping = spec.grouping
    tissues = [t for t, lo, hi in template.blocks for _ in range(int(rng.integers(lo, hi + 1)))]

    if fam is Family.JOINT:
        rho = 0.0 if spec.has(Constraint.RHO_ZERO) else theta.scalar("rho")
        z = rng.standard_normal(2)
        a_area, a_count = z[0], rho * z[0] + math.sqrt(1.0 - rho * rho) * z[1]
    else:
        a = rng.normal(0.0, math.sqrt(theta.scalar("tau2")))
    a_pla = rng.normal(0.0, math.sqrt(truth.pla.scalar("tau2"))) if truth.pla is not None else 0.0

    def fixed(params: ParamVector, tissue: TissueType, suffix: str = "") -> float:
        level = grouping.level_of(tissue)
        beta = np.concatenate([[0.0], params[f"beta{suffix}"]])
        return params.scalar(f"alpha{suffix}") + beta[level]

    fields = []
    clipped = 0
    for j, tissue in enumerate(tissues):
        if fam.is_count:
            mu = math.exp(fixed(theta, tissue) + a)
            if fam is Family.LVD_NEGBIN:
                kappa = theta.scalar("dispersion")
                n = 1 + int(rng.negative_binomial(kappa, kappa / (kappa + mu)))
            else:
                n = 1 + int(rng.poisson(mu))
        elif fam is Family.JOINT:
            n = 1 + int(rng.poisson(math.exp(fixed(theta, tissue, "_n") + theta.scalar("lambda_n") * a_count)))
        else:
            n = 1 + int(rng.poisson(BACKGROUND_LVD_MU))

        log_area = rng.normal(*BACKGROUND_LOG_AREA, size=n)
        logit_circ = rng.normal(*BACKGROUND_LOGIT_CIRC, size=n)
        if fam.has_field_effect:
            var = theta.scalar("nu2")
            if fam is Family.CIRC_HET and not spec.has(Constraint.DELTA_EQUAL):
                var *= np.concatenate([theta["delta"], [1.0]])[spec.multiplier_grouping.level_of(tissue)]
            b = rng.normal(0.0, math.sqrt(var))
            noise = rng.normal(0.0, math.sqrt(theta.scalar("sigma2")), size=n)
            if fam is Family.JOINT:
                log_area = fixed(theta, tissue, "_a") + theta.scalar("lambda_a") * a_area + b + noise
            elif fam is Family.CIRC_HET:
                logit_circ = fixed(theta, tissue) + a + b + noise
            else:
                mean = fixed(theta, tissue) + a + b
                if fam is Family.VA_CONDITIONAL:
                    mean += theta.scalar("gamma") / n
                log_area = mean + noise

        areas = np.exp(log_area)
        if fam is Family.PLA_LMM:
            pla = fixed(theta, tissue) + a + rng.normal(0.0, math.sqrt(theta.scalar("sigma2")))
        elif truth.pla is not None:
            pla = fixed(truth.pla, tissue) + a_pla + rng.normal(0.0, math.sqrt(truth.pla.scalar("sigma2")))
        else:
            pla = 100.0 * float(np.sum(areas)) / FIELD_AREA_UM2
        if pla < 0.0:
            clipped += 1
            pla = 0.0
        circ = 1.0 / (1.0 + np.exp(-logit_circ))
        vessels = tuple(
            Vessel(f"V{k + 1:04d}", _sig6(float(areas[k])), _open_unit(float(circ[k]))) for k in range(n)
        )
        fields.append(Field(f"F{j + 1:03d}", tissue, _sig6(pla), vessels))
    return _SpecimenDraw(Specimen(f"S{index + 1:0{width}d}", tuple(fields)), clipped)


def simulate_dataset(
    spec: ModelSpec, truth: TrueParams, design: DesignPreset, seed: int, n_jobs: int = 1
) -> Dataset:
    """Draw a dataset from the generative model of ``spec``.

    :param spec: Generating model; must equal ``truth.spec``.
    :param truth: Generating parameters.
    :param design: Specimen/field layout.
    :param seed: Base seed; specimen ``i`` uses substream ``(seed, i)``.
    :param n_jobs: Worker count for per-specimen generation (result does not depend on it).
    :raises ModelSpecError: if the parameters do not match the model.
    """
    if truth.spec != spec:
        msg = f"truth was built for {truth.spec.describe()}, not {spec.describe()}"
        raise ModelSpecError(msg)
    truth.validate()
    templates = design.expand()
    width = max(3, len(str(len(templates))))
    if n_jobs == 1:
        draws = [_simulate_specimen(i, t, truth, seed, width) for i, t in enumerate(templates)]
    else:
        draws = Parallel(n_jobs=n_jobs)(
            delayed(_simulate_specimen)(i, t, truth, seed, width) for i, t in enumerate(templates)
        )
    clipped = sum(dr.clipped_pla for dr in draws)
    if clipped:
        msg = f"{clipped} simulated %LA value(s) were negative and clipped to 0"
        logger.warning(msg)
        warnings.warn(msg, SimulationWarning, stacklevel=2)
    dataset = Dataset(tuple(dr.specimen for dr in draws))
    logger.info(
        "simulated %s on design %s (seed %d): %d specimens, %d fields, %d vessels",
        spec.family.value,
        design.name,
        seed,
        dataset.n_specimens,
        dataset.n_fields,
        dataset.n_vessels,
    )
    return dataset


@dataclass(frozen=True)
class PowerSample:
    """Flat one-way layout: ``values[i]`` belongs to group ``groups[i]``."""

    values: np.ndarray
    groups: np.ndarray

    def by_group(self) -> list[np.ndarray]:
        return [self.values[self.groups == g] for g in np.unique(self.groups)]


def simulate_power_scenario(
    group_means: tuple[float, ...] | list[float] | np.ndarray,
    within_sd: float,
    n_per_group: int,
    seed: int | np.random.SeedSequence,
) -> PowerSample:
    """Draw ``n_per_group`` iid normal values around each group mean.

    :param group_means: Group means (at least two).
    :param within_sd: Common within-group SD, positive.
    :param n_per_group: Observations per group, at least 2.
    :param seed: Seed or SeedSequence.
    """
    means = np.asarray(group_means, dtype=float)
    if means.size < 2:
        msg = "need at least two groups"
        raise ValueError(msg)
    if not within_sd > 0.0:
        msg = f"within_sd must be positive, got {within_sd}"
        raise ValueError(msg)
    if n_per_group < 2:
        msg = f"n_per_group must be at least 2, got {n_per_group}"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(means.size), n_per_group)
    values = means[groups] + within_sd * rng.standard_normal(groups.size)
    return PowerSample(values, groups)


def study_truth(family: Family, grouping: Grouping = Grouping.COARSE, rho_zero: bool = False) -> TrueParams:
    """Generating values taken from the study's reported estimates.

    Intercepts come from the control-ectocervix means of the exploratory
    table; the conditional model's γ is ln 19.7 because the reported value is
    on the ratio scale.
    """
    def expand(coarse_values: tuple[float, float, float]) -> np.ndarray:
        tz, cin, carc = coarse_values
        if grouping is Grouping.COARSE:
            return np.array([tz, cin, carc])
        return np.array([tz, cin, cin, cin, carc])

    def expand_delta(ecto: float, tz: float, cin: float) -> np.ndarray:
        if grouping is Grouping.COARSE:
            return np.array([ecto, tz, cin])
        return np.array([ecto, tz, cin, cin, cin])

    log = math.log
    alpha_area = 6.95
    alpha_lvd = log(1.34)
    constraints = frozenset({Constraint.RHO_ZERO}) if rho_zero else frozenset()
    if family is Family.PLA_LMM:
        theta = ParamVector(alpha=3.51, beta=expand((1.85, 0.28, -0.04)), tau2=1.20, sigma2=8.63)
    elif family is Family.LVD_POIS:
        theta = ParamVector(alpha=alpha_lvd, beta=expand((log(2.37), log(2.31), log(3.71))), tau2=0.03)
    elif family is Family.LVD_NEGBIN:
        theta = ParamVector(
            alpha=alpha_lvd, beta=expand((log(2.37), log(2.31), log(3.71))), tau2=0.03, dispersion=5.0
        )
    elif family is Family.VA_LMM:
        theta = ParamVector(
            alpha=alpha_area, beta=expand((log(0.53), log(0.42), log(0.26))), tau2=0.12, nu2=0.22, sigma2=1.02
        )
    elif family is Family.CIRC_HET:
        theta = ParamVector(
            alpha=math.log(0.54 / 0.46),
            beta=expand((log(1.27), log(1.37), log(1.01))),
            tau2=0.05,
            nu2=0.13,
            sigma2=0.95,
            delta=expand_delta(0.85, 0.98, 0.91),
        )
    elif family is Family.VA_CONDITIONAL:
        theta = ParamVector(
            alpha=6.3,
            beta=expand((log(1.09), log(0.91), log(0.69))),
            gamma=log(19.7),
            tau2=0.12,
            nu2=0.22,
            sigma2=1.02,
        )
    else:
        theta = ParamVector(
            alpha_a=alpha_area,
            beta_a=expand((log(0.54), log(0.42), log(0.26))),
            alpha_n=alpha_lvd,
            beta_n=expand((log(2.35), log(2.34), log(3.78))),
            lambda_a=0.25,
            lambda_n=-0.13,
            nu2=0.19,
            sigma2=1.01,
        )
        if not rho_zero:
            theta = theta.replace(rho=-0.78)
    spec = ModelSpec(family, grouping, constraints if family is Family.JOINT else frozenset())
    return TrueParams(spec, theta)
