from clustersize.constraint import Family
from clustersize.dataset import Dataset
from clustersize.errors import BoundaryWarning, ModelSpecError
from clustersize.marginal import marginal_loglik
from clustersize.mlfit import (
    LRTResult,
    MLFit,
    MLOptions,
    compare_overdispersion,
    delta_equality_lrt,
    delta_split_lrt,
    field_effects_posterior_mean,
    fit_ml,
    free_mask,
    loglik_gradient,
    lrt,
    naive_standard_errors,
    numerical_gradient,
)
from clustersize.model import field_fixed_predictor
from clustersize.params import ModelSpec, ParamVector
from clustersize.simulate import DesignPreset, study_truth
from clustersize.tissue import TissueType

from tests.datasets import random_points, simulated, spec_of, tiny_dataset

from unittest import TestCase

import math
import numpy as np
import pytest


def stub_fit(loglik, n_free=3):
    truth = study_truth(Family.CIRC_HET)
    return MLFit(truth.spec, truth.theta, loglik, True, 10, n_free=n_free)


class TestOptions(TestCase):
    """Test MLOptions validation."""

    def test_invalid(self):
        with pytest.raises(ValueError, match="max_iter"):
            MLOptions(max_iter=-1)
        with pytest.raises(ValueError, match="gtol"):
            MLOptions(gtol=0.0)
        with pytest.raises(ValueError, match="n_nodes"):
            MLOptions(n_nodes=0)


class TestLikelihoodRatio(TestCase):
    """Test the likelihood-ratio p-value."""

    def test_p_value(self):
        p = lrt(stub_fit(-100.0), stub_fit(-106.9), 2)
        assert np.isclose(p, math.exp(-6.9))
        assert abs(p - 0.001) < 1e-4

    def test_bad_df(self):
        with pytest.raises(ValueError, match="degrees of freedom"):
            lrt(stub_fit(-100.0), stub_fit(-101.0), 0)

    def test_negative_statistic_clamped(self):
        with pytest.warns(BoundaryWarning):
            p = lrt(stub_fit(-101.0), stub_fit(-100.0), 1)
        assert p == 1.0


class TestFreeMask(TestCase):
    """Test identification of the free parameters."""

    def test_all_levels_present(self):
        spec = ModelSpec(Family.CIRC_HET)
        assert free_mask(spec, tiny_dataset().arrays).all()

    def test_missing_reference(self):
        d = tiny_dataset()
        no_controls = Dataset(d.specimens[1:])
        spec = ModelSpec(Family.CIRC_HET)
        layout = spec.layout()
        mask = dict(zip(layout.names, free_mask(spec, no_controls.arrays)))
        assert not mask["beta[TZ]"]
        assert not mask["beta[CIN]"]
        assert mask["beta[CARC]"]
        assert not mask["delta[ECTO]"]
        assert not mask["delta[TZ]"]
        assert mask["delta[CIN]"]
        assert mask["alpha"] and mask["tau2"] and mask["nu2"] and mask["sigma2"]


class TestGradient(TestCase):
    """Test the numerical score against the closed-form Gaussian score."""

    def test_pla_intercept(self):
        truth = study_truth(Family.PLA_LMM)
        d = tiny_dataset()
        arr = d.arrays
        theta = truth.theta
        resid = arr.pla - field_fixed_predictor(truth.spec, theta, arr)
        score = 0.0
        for i in range(arr.n_specimens):
            rows = np.flatnonzero(arr.field_specimen == i)
            cov = theta.scalar("tau2") + theta.scalar("sigma2") * np.eye(rows.size)
            score += np.linalg.solve(cov, resid[rows]).sum()
        grad = loglik_gradient(truth.spec, theta, d)
        assert np.isclose(grad[0], score, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("family", list(Family), ids=lambda f: f.value)
def test_gradient_matches_coarser_differences(family):
    d, _ = simulated(family, seed=7, design=DesignPreset.balanced(2, 3, tuple(TissueType)))
    spec = spec_of(family)
    layout = spec.layout()
    for theta in random_points(spec, np.random.default_rng(11)):
        fine = loglik_gradient(spec, theta, d)
        u = layout.to_unconstrained(theta)
        coarse = numerical_gradient(lambda v: marginal_loglik(spec, layout.from_unconstrained(v), d), u, step=1e-4)
        scale = max(1.0, float(np.max(np.abs(coarse))))
        assert np.max(np.abs(fine - coarse)) <= 1e-4 * scale, family.value


class TestFitML(TestCase):
    """Test marginal maximum likelihood on simulated data."""

    def test_pla_recovery(self):
        d, truth = simulated(Family.PLA_LMM, design=DesignPreset.balanced(20, 4, tuple(TissueType)))
        fit = fit_ml(truth.spec, d)
        assert fit.max_loglik >= marginal_loglik(truth.spec, truth.theta, d) - 1e-6
        est = fit.estimates()
        assert abs(est["alpha"] - 3.51) < 1.5
        assert abs(est["beta[TZ]"] - 1.85) < 2.0
        for name, (lo, hi) in fit.intervals.items():
            assert lo <= est[name] <= hi, name
            assert fit.standard_errors[name] > 0.0
        assert fit.n_free == len(est)
        assert fit.fixed == ()

    def test_va_recovery(self):
        d, truth = simulated(Family.VA_LMM)
        fit = fit_ml(truth.spec, d)
        assert fit.max_loglik >= marginal_loglik(truth.spec, truth.theta, d) - 1e-6
        est = fit.estimates()
        assert abs(est["alpha"] - 6.95) < 0.6
        assert abs(est["beta[CARC]"] - math.log(0.26)) < 0.8
        assert est["sigma2"] > 0.5
        out = fit.to_dict()
        assert out["method"] == "ml"
        assert out["spec"]["family"] == "va_lmm"
        assert out["interval_kind"] == "wald"

    def test_poisson(self):
        d, truth = simulated(Family.LVD_POIS)
        fit = fit_ml(truth.spec, d)
        assert fit.max_loglik >= marginal_loglik(truth.spec, truth.theta, d) - 1e-6
        assert abs(fit.estimates()["alpha"] - math.log(1.34)) < 0.6

    def test_absent_levels_fixed(self):
        d, truth = simulated(
            Family.VA_LMM,
            design=DesignPreset.balanced(5, 3, (TissueType.ControlEctocervix, TissueType.InvasiveCarcinoma)),
        )
        fit = fit_ml(truth.spec, d)
        assert set(fit.fixed) == {"beta[TZ]", "beta[CIN]"}
        est = fit.estimates()
        assert est["beta[TZ]"] == 0.0
        assert est["beta[CIN]"] == 0.0
        assert "beta[TZ]" not in fit.standard_errors or math.isnan(fit.standard_errors["beta[TZ]"])

    def test_no_standard_errors(self):
        d, truth = simulated(Family.VA_LMM, design=DesignPreset.balanced(2, 3, tuple(TissueType)))
        fit = fit_ml(truth.spec, d, opts=MLOptions(compute_se=False))
        assert fit.standard_errors == {}
        assert fit.intervals == {}


class TestComparisons(TestCase):
    """Test the nested-model comparisons."""

    def test_overdispersion(self):
        d, _ = simulated(Family.LVD_POIS)
        report = compare_overdispersion(d)
        assert report.delta_loglik > -0.05
        assert report.dispersion > 0.0
        out = report.to_dict()
        assert out["poisson"]["spec"]["family"] == "lvd_pois"
        assert out["negbin"]["spec"]["family"] == "lvd_negbin"

    def test_delta_equality(self):
        d, _ = simulated(Family.CIRC_HET, design=DesignPreset.balanced(4, 3, tuple(TissueType)))
        result = delta_equality_lrt(d)
        assert isinstance(result, LRTResult)
        assert result.df == 3
        assert result.statistic >= 0.0
        assert 0.0 <= result.p_value <= 1.0
        assert result.to_dict()["constrained"]["constraints"] == ["delta_equal"]

    @pytest.mark.slow
    def test_delta_split(self):
        d, _ = simulated(Family.CIRC_HET, design=DesignPreset.balanced(4, 3, tuple(TissueType)))
        result = delta_split_lrt(d)
        assert result.df == 2
        assert result.general.spec.describe()["delta_grouping"] == "fine"
        assert 0.0 <= result.p_value <= 1.0


class TestNaiveAndFieldEffects(TestCase):
    """Test the clustering-ignoring SEs and the field-effect conditional means."""

    def test_naive(self):
        d, truth = simulated(Family.VA_LMM)
        fit = fit_ml(truth.spec, d)
        rows = naive_standard_errors(fit, d)
        assert [r.label for r in rows] == ["alpha", "beta[TZ]", "beta[CIN]", "beta[CARC]"]
        for r in rows:
            assert r.naive_se > 0.0
            assert r.model_se == fit.standard_errors[r.label]

    def test_naive_requires_gaussian(self):
        truth = study_truth(Family.LVD_POIS)
        fit = MLFit(truth.spec, truth.theta, -1.0, True, 1)
        with pytest.raises(ModelSpecError, match="Gaussian"):
            naive_standard_errors(fit, tiny_dataset())

    def test_field_effects_match_dense(self):
        truth = study_truth(Family.CIRC_HET)
        d = tiny_dataset()
        arr = d.arrays
        frame = field_effects_posterior_mean(truth.spec, truth.theta, d)
        assert len(frame) == arr.n_fields
        theta = truth.theta
        tau2, nu2, sigma2 = theta.scalar("tau2"), theta.scalar("nu2"), theta.scalar("sigma2")
        delta = np.concatenate([theta["delta"], [1.0]])[arr.field_level(truth.spec.grouping)]
        resid = arr.logit_circularity - field_fixed_predictor(truth.spec, theta, arr)[arr.vessel_field]
        for i in range(arr.n_specimens):
            rows = np.flatnonzero(arr.vessel_specimen == i)
            fields = arr.vessel_field[rows]
            same = fields[:, None] == fields[None, :]
            c = nu2 * delta[fields]
            cov = tau2 + np.where(same, c[:, None], 0.0) + sigma2 * np.eye(rows.size)
            weights = np.linalg.solve(cov, resid[rows])
            a_hat = tau2 * weights.sum()
            for f in np.unique(fields):
                b_hat = nu2 * delta[f] * weights[fields == f].sum()
                assert np.isclose(frame["specimen_effect"].iloc[f], a_hat)
                assert np.isclose(frame["field_effect"].iloc[f], b_hat)

    def test_field_effects_family(self):
        truth = study_truth(Family.PLA_LMM)
        with pytest.raises(ModelSpecError):
            field_effects_posterior_mean(truth.spec, truth.theta, tiny_dataset())
