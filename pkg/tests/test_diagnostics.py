from clustersize.constraint import Family
from clustersize.diagnostics import (
    autocorrelation,
    diagnose,
    ess,
    is_degenerate,
    split_rhat,
    summarize_draws,
    summarize_posterior,
)
from clustersize.mcmc import ChainConfig, ChainResult
from clustersize.params import DEFAULT_PRIORS
from clustersize.simulate import study_truth

from unittest import TestCase

import math
import numpy as np
import pytest


def ar1(rng, n, phi, n_chains=1):
    out = np.empty((n_chains, n))
    for c in range(n_chains):
        x = rng.standard_normal() / math.sqrt(1.0 - phi * phi)
        for t in range(n):
            x = phi * x + rng.standard_normal()
            out[c, t] = x
    return out


def synthetic_chains(family=Family.VA_LMM, n_chains=2, n_kept=600, noise=0.01, seed=1):
    truth = study_truth(family)
    layout = truth.spec.layout()
    centre = layout.pack(truth.theta)
    rng = np.random.default_rng(seed)
    draws = centre + noise * rng.standard_normal((n_chains, n_kept, centre.size))
    return ChainResult(
        spec=truth.spec,
        priors=DEFAULT_PRIORS,
        config=ChainConfig.desk(),
        names=layout.names,
        draws=draws,
        logpost=rng.standard_normal((n_chains, n_kept)),
        acceptance={"coef": np.full(n_chains, 0.3)},
    )


class TestEffectiveSampleSize(TestCase):
    """Test ESS against known autocorrelation."""

    def test_ar1(self):
        rng = np.random.default_rng(11)
        n = 40_000
        value = ess(ar1(rng, n, 0.5))
        assert n / 3 * 0.85 < value < n / 3 * 1.15

    def test_independent(self):
        rng = np.random.default_rng(12)
        value = ess(rng.standard_normal((4, 2000)))
        assert 6000 < value < 10_000

    def test_degenerate_and_short(self):
        assert math.isnan(ess(np.ones(100)))
        assert math.isnan(ess(np.array([1.0, 2.0, 3.0])))
        assert is_degenerate(np.full((2, 10), 3.0))
        assert not is_degenerate(np.array([1.0, 1.0, 2.0]))

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="shape"):
            ess(np.zeros((2, 3, 4)))


class TestSplitRhat(TestCase):
    """Test the split potential scale reduction."""

    def test_mixed_chains(self):
        rng = np.random.default_rng(13)
        value = split_rhat(rng.standard_normal((4, 2000)))
        assert 0.99 < value < 1.01

    def test_disagreeing_chains(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 1000))
        x[1] += 3.0
        assert split_rhat(x) > 1.1

    def test_trend_within_one_chain(self):
        x = np.linspace(0.0, 10.0, 1000) + np.random.default_rng(15).standard_normal(1000) * 0.1
        assert split_rhat(x) > 1.1

    def test_degenerate(self):
        assert math.isnan(split_rhat(np.zeros((2, 100))))
        assert math.isnan(split_rhat(np.array([1.0, 2.0, 3.0])))


class TestAutocorrelation(TestCase):
    """Test the autocorrelation table."""

    def test_ar1_lag_one(self):
        acf = autocorrelation(ar1(np.random.default_rng(16), 20_000, 0.5), max_lag=5)
        assert acf.size == 5
        assert abs(acf[0] - 0.5) < 0.03
        assert abs(acf[1] - 0.25) < 0.03

    def test_truncated(self):
        assert autocorrelation(np.array([1.0, 2.0, 0.0, 4.0, 3.0]), max_lag=50).size == 4

    def test_degenerate(self):
        assert np.all(np.isnan(autocorrelation(np.ones(20), max_lag=3)))


class TestSummaries(TestCase):
    """Test posterior summaries and convergence flags."""

    def test_quantiles_on_draws(self):
        row = summarize_draws("x", np.array([-1.0, 0.0, 1.0]))
        assert row.lower == -1.0
        assert row.upper == 1.0
        assert row.median == 0.0
        assert not row.degenerate
        assert math.isnan(row.ess)
        assert math.isnan(row.mc_se)

    def test_degenerate_mc_se(self):
        row = summarize_draws("x", np.zeros(50))
        assert row.degenerate
        assert row.mc_se == 0.0

    def test_posterior_effects(self):
        chains = synthetic_chains()
        fit = summarize_posterior(chains)
        assert set(fit.rows) == set(chains.names)
        assert np.isclose(fit.median("alpha"), 6.95, atol=0.01)
        assert len(fit.effects) == 3
        for effect in fit.effects:
            assert effect.lower < effect.effect.ratio < effect.upper
        out = fit.to_dict()
        assert out["method"] == "mcmc"
        assert out["n_chains"] == 2
        assert out["n_kept"] == 600

    def test_diagnose_ok(self):
        report = diagnose(synthetic_chains())
        assert report.ok
        text = report.to_text({"seed": 1})
        assert text.startswith("# seed: 1\nstatus: OK\n")
        assert "autocorrelation by lag" in text

    def test_diagnose_flags(self):
        chains = synthetic_chains()
        draws = chains.draws.copy()
        draws[1, :, 0] += 1.0
        draws[:, :, 1] = 0.5
        flagged = ChainResult(
            chains.spec, chains.priors, chains.config, chains.names, draws, chains.logpost, chains.acceptance
        )
        report = diagnose(flagged)
        assert not report.ok
        assert "alpha" in report.rhat_flags
        assert chains.names[1] in report.degenerate
        assert chains.names[1] not in report.rhat_flags
        assert "status: FLAGGED" in report.to_text()

    def test_fixed_not_flagged(self):
        chains = synthetic_chains()
        draws = chains.draws.copy()
        draws[1, :, 0] += 1.0
        fixed = ChainResult(
            chains.spec,
            chains.priors,
            chains.config,
            chains.names,
            draws,
            chains.logpost,
            chains.acceptance,
            fixed=("alpha",),
        )
        assert diagnose(fixed).ok
