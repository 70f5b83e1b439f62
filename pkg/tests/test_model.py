from clustersize.constraint import Constraint, Family
from clustersize.dataset import Dataset, Specimen
from clustersize.errors import ModelSpecError
from clustersize.model import (
    conditional_terms,
    effect_table,
    icc,
    icc_levels,
    initial_params,
    latent_terms,
    loglik_conditional,
    logpost,
    logprior,
    orient_signs,
    shifted_negbin_logpmf,
    shifted_poisson_logpmf,
    specimen_effect_logdensity,
    _gamma_logpdf,
)
from clustersize.params import DEFAULT_PRIORS, LatentState, ModelSpec, ParamVector
from clustersize.simulate import DesignPreset, study_truth
from clustersize.tissue import TissueType

from tests.datasets import make_field, simulated

from unittest import TestCase

import math
import numpy as np
import pytest
from scipy.stats import norm, poisson


class TestCountPmfs(TestCase):
    """Test the shifted count distributions."""

    def test_shifted_poisson_values(self):
        assert np.isclose(shifted_poisson_logpmf(3, 2.0), -2.0 + math.log(2.0), rtol=0.0, atol=1e-12)
        assert shifted_poisson_logpmf(1, 0.0) == 0.0
        with pytest.raises(ValueError, match=">= 1"):
            shifted_poisson_logpmf(0, 1.0)

    def test_shifted_poisson_normalises(self):
        n = np.arange(1, 201)
        for mu in (0.1, 1.0, 5.0, 20.0):
            total = math.fsum(np.exp(shifted_poisson_logpmf(n, mu)))
            assert abs(total - 1.0) < 1e-10

    def test_shifted_negbin(self):
        n = np.arange(1, 3001)
        total = math.fsum(np.exp(shifted_negbin_logpmf(n, 5.0, 2.0)))
        assert abs(total - 1.0) < 1e-10
        mean = math.fsum((n - 1) * np.exp(shifted_negbin_logpmf(n, 5.0, 2.0)))
        assert np.isclose(mean, 5.0)
        # large dispersion approaches the Poisson
        assert np.isclose(shifted_negbin_logpmf(4, 3.0, 1e8), shifted_poisson_logpmf(4, 3.0), atol=1e-6)
        with pytest.raises(ValueError):
            shifted_negbin_logpmf(0, 1.0, 1.0)


def _single_field_pla():
    field = make_field("F1", TissueType.ControlEctocervix, [100.0], pla=2.0)
    return Dataset((Specimen("S1", (field,)),))


class TestConditionalLikelihood(TestCase):
    """Test conditional log-likelihoods against direct density evaluations."""

    def setUp(self):
        design = DesignPreset.balanced(1, 2, tuple(TissueType))
        self.d, self.truth = simulated(Family.JOINT, seed=3, design=design)
        rng = np.random.default_rng(11)
        arr = self.d.arrays
        self.latent = LatentState(rng.standard_normal((arr.n_specimens, 2)), 0.3 * rng.standard_normal(arr.n_fields))

    def test_pla_single_observation(self):
        spec = ModelSpec(Family.PLA_LMM)
        theta = ParamVector(alpha=2.0, beta=[0.0, 0.0, 0.0], tau2=1.0, sigma2=1.0)
        ll = loglik_conditional(spec, theta, LatentState(np.zeros(1)), _single_field_pla())
        assert np.isclose(ll, -0.5 * math.log(2.0 * math.pi))

    def test_joint_against_direct_densities(self):
        spec, theta = self.truth.spec, self.truth.theta
        arr = self.d.arrays
        a, b = self.latent.a, self.latent.b
        level = arr.field_level(spec.grouping)
        beta_a = np.r_[0.0, theta["beta_a"]]
        beta_n = np.r_[0.0, theta["beta_n"]]
        total = 0.0
        for j in range(arr.n_fields):
            i = arr.field_specimen[j]
            mean = theta.scalar("alpha_a") + beta_a[level[j]] + theta.scalar("lambda_a") * a[i, 0] + b[j]
            y = arr.log_area[arr.vessel_field == j]
            total += norm.logpdf(y, mean, math.sqrt(theta.scalar("sigma2"))).sum()
            mu = math.exp(theta.scalar("alpha_n") + beta_n[level[j]] + theta.scalar("lambda_n") * a[i, 1])
            total += poisson.logpmf(arr.lvd[j] - 1, mu)
        assert np.isclose(loglik_conditional(spec, theta, self.latent, self.d), total, rtol=1e-12)

    def test_joint_decomposes_without_correlation(self):
        theta = self.truth.theta
        spec = self.truth.spec.with_constraint(Constraint.RHO_ZERO)
        theta0 = ParamVector({k: theta[k] for k in theta if k != "rho"})
        joint = loglik_conditional(spec, theta0, self.latent, self.d)
        area = ParamVector(
            alpha=theta["alpha_a"], beta=theta["beta_a"], tau2=1.0, nu2=theta["nu2"], sigma2=theta["sigma2"]
        )
        count = ParamVector(alpha=theta["alpha_n"], beta=theta["beta_n"], tau2=1.0)
        a = self.latent.a
        va = loglik_conditional(
            ModelSpec(Family.VA_LMM), area, LatentState(theta.scalar("lambda_a") * a[:, 0], self.latent.b), self.d
        )
        lvd = loglik_conditional(ModelSpec(Family.LVD_POIS), count, LatentState(theta.scalar("lambda_n") * a[:, 1]), self.d)
        assert abs(joint - (va + lvd)) < 1e-10

    def test_sign_symmetry(self):
        spec, theta = self.truth.spec, self.truth.theta
        flipped = theta.replace(lambda_a=-theta.scalar("lambda_a"), lambda_n=-theta.scalar("lambda_n"))
        neg = LatentState(-self.latent.a, self.latent.b)
        lp = logpost(spec, DEFAULT_PRIORS, theta, self.latent, self.d)
        assert np.isclose(logpost(spec, DEFAULT_PRIORS, flipped, neg, self.d), lp, rtol=1e-13)

    def test_circularity_equal_multipliers(self):
        d, truth = simulated(Family.CIRC_HET, seed=5, design=DesignPreset.balanced(1, 3, tuple(TissueType)))
        arr = d.arrays
        latent = LatentState(np.zeros(arr.n_specimens), 0.2 * np.ones(arr.n_fields))
        general = ModelSpec(Family.CIRC_HET)
        equal = general.with_constraint(Constraint.DELTA_EQUAL)
        theta = truth.theta.replace(delta=[1.0, 1.0, 1.0])
        theta_eq = ParamVector({k: theta[k] for k in theta if k != "delta"})

        def total(spec, th):
            cond = conditional_terms(spec, th, latent, arr)
            return math.fsum(cond["vessel"]) + math.fsum(latent_terms(spec, th, latent, arr))

        assert total(general, theta) == total(equal, theta_eq)

    def test_dimension_and_variance_errors(self):
        spec, theta = self.truth.spec, self.truth.theta
        with pytest.raises(ModelSpecError, match="specimen effects"):
            loglik_conditional(spec, theta, LatentState(np.zeros(2), self.latent.b), self.d)
        with pytest.raises(ModelSpecError, match="sigma2 must be positive"):
            loglik_conditional(spec, theta.replace(sigma2=-1.0), self.latent, self.d)


class TestPriorAndPosterior(TestCase):
    """Test priors, latent densities and the log posterior."""

    def setUp(self):
        self.truth = study_truth(Family.JOINT)
        self.spec = self.truth.spec

    def test_uniform_terms(self):
        lp = logprior(self.spec, DEFAULT_PRIORS, self.truth.theta)
        assert math.isfinite(lp)
        assert logprior(self.spec, DEFAULT_PRIORS, self.truth.theta.replace(rho=0.99)) == -math.inf
        # uniform on the loading bounds: the value of λ^A inside the bounds does not matter
        moved = logprior(self.spec, DEFAULT_PRIORS, self.truth.theta.replace(lambda_a=0.0))
        assert np.isclose(moved, lp)

    def test_gamma_density(self):
        x = 1e-3
        lngamma = -math.log(x) - 0.5772156649015329 * x + math.pi**2 / 12.0 * x * x
        expected = x * math.log(x) - lngamma - x
        assert np.isclose(_gamma_logpdf(np.array([1.0]), x, x)[0], expected, atol=1e-6)

    def test_bivariate_latent_density(self):
        value = specimen_effect_logdensity(self.spec, self.truth.theta, np.zeros((1, 2)))[0]
        assert np.isclose(value, -math.log(2.0 * math.pi) - 0.5 * math.log(1.0 - 0.78**2))

    def test_logpost_outside_support(self):
        d, _ = simulated(Family.JOINT, seed=2, design=DesignPreset.balanced(1, 1, tuple(TissueType)))
        latent = LatentState.zeros(self.spec, d.n_specimens, d.n_fields)
        assert logpost(self.spec, DEFAULT_PRIORS, self.truth.theta.replace(lambda_n=11.0), latent, d) == -math.inf


class TestDerivedQuantities(TestCase):
    """Test ICCs, effect tables and sign orientation."""

    def test_icc(self):
        assert round(icc(1.20, 8.63), 4) == 0.1221
        assert icc(2.0, 2.0) == 0.5
        assert icc(1e-12, 1.0) < 1e-11
        with pytest.raises(ValueError, match="positive"):
            icc(0.0, 1.0)

    def test_icc_levels(self):
        theta = study_truth(Family.VA_LMM).theta
        levels = icc_levels(ModelSpec(Family.VA_LMM), theta)
        assert np.isclose(levels["specimen"], 0.12 / 1.36)
        assert np.isclose(levels["field"], 0.34 / 1.36)
        assert set(icc_levels(ModelSpec(Family.PLA_LMM), study_truth(Family.PLA_LMM).theta)) == {"specimen"}
        with pytest.raises(ModelSpecError):
            icc_levels(ModelSpec(Family.LVD_POIS), study_truth(Family.LVD_POIS).theta)

    def test_effect_table(self):
        rows = effect_table(study_truth(Family.LVD_POIS).theta, ModelSpec(Family.LVD_POIS))
        carc = [r for r in rows if r.level == "CARC"][0]
        assert np.isclose(carc.ratio, 3.71)
        assert carc.outcome == "lvd"
        joint = effect_table(study_truth(Family.JOINT).theta, ModelSpec(Family.JOINT))
        area_carc = [r for r in joint if r.outcome == "vessel_area" and r.level == "CARC"][0]
        assert area_carc.phrase == "3.85-fold reduction"
        pla = effect_table(study_truth(Family.PLA_LMM).theta, ModelSpec(Family.PLA_LMM))
        assert pla[0].ratio is None
        assert pla[0].phrase == "+1.85 difference"
        zero = effect_table(ParamVector(alpha=0.0, beta=[0.0, 0.0, 0.0], tau2=1.0), ModelSpec(Family.LVD_POIS))
        assert all(r.ratio == 1.0 for r in zero)

    def test_orient_signs(self):
        spec = ModelSpec(Family.JOINT)
        theta = study_truth(Family.JOINT).theta
        one_flip = orient_signs(spec, theta.replace(lambda_a=-0.25))
        assert one_flip.scalar("lambda_a") == 0.25
        assert one_flip.scalar("rho") == 0.78
        both = orient_signs(spec, theta.replace(lambda_a=-0.25, lambda_n=0.13))
        assert both.scalar("lambda_n") == -0.13
        assert both.scalar("rho") == -0.78
        assert orient_signs(spec, theta) == theta


@pytest.mark.parametrize("family", list(Family))
def test_initial_params_are_valid(family):
    d, truth = simulated(family, seed=4, design=DesignPreset.balanced(2, 2, tuple(TissueType)))
    theta = initial_params(truth.spec, d)
    theta.validate(truth.spec)
    latent = LatentState.zeros(truth.spec, d.n_specimens, d.n_fields)
    assert math.isfinite(logpost(truth.spec, DEFAULT_PRIORS, theta, latent, d))
