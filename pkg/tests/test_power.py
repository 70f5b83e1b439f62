from clustersize.power import (
    PowerScenario,
    anova_power,
    difference_parameter,
    noncentral_f_sf,
    noncentrality,
    required_n,
    simulated_power,
)

from unittest import TestCase

import numpy as np
import pytest
from scipy.stats import f


class TestPowerScenario(TestCase):
    """Test scenario validation and the effect-size summaries."""

    def setUp(self):
        self.scenario = PowerScenario((2.6, 5.0, 10.0), 7.5, 25)

    def test_difference_parameter(self):
        assert abs(difference_parameter(self.scenario) - 0.504) < 0.001

    def test_noncentrality(self):
        means = np.array([2.6, 5.0, 10.0])
        expected = 25 * np.sum((means - means.mean()) ** 2) / 7.5**2
        assert np.isclose(noncentrality(self.scenario), expected)

    def test_invalid(self):
        with pytest.raises(ValueError, match="two group means"):
            PowerScenario((1.0,), 1.0)
        with pytest.raises(ValueError, match="within_sd"):
            PowerScenario((1.0, 2.0), -1.0)
        with pytest.raises(ValueError, match="alpha"):
            PowerScenario((1.0, 2.0), 1.0, alpha=1.0)
        with pytest.raises(ValueError, match="n_per_group"):
            anova_power(PowerScenario((1.0, 2.0), 1.0, n_per_group=1))

    def test_to_dict(self):
        assert self.scenario.to_dict() == {
            "group_means": [2.6, 5.0, 10.0],
            "within_sd": 7.5,
            "n_per_group": 25,
            "alpha": 0.05,
        }


class TestAnovaPower(TestCase):
    """Test the noncentral-F power of the one-way F test."""

    def test_study_design(self):
        power = anova_power(PowerScenario((2.6, 5.0, 10.0), 7.5, 25))
        assert 0.88 <= power <= 0.92

    def test_zero_effect(self):
        power = anova_power(PowerScenario((4.0, 4.0, 4.0), 7.5, 25, alpha=0.05))
        assert np.isclose(power, 0.05)

    def test_monotone(self):
        base = PowerScenario((2.6, 5.0, 10.0), 7.5, 10)
        powers = [anova_power(base.with_n(n)) for n in range(2, 60, 4)]
        assert all(a < b for a, b in zip(powers, powers[1:]))
        assert anova_power(PowerScenario((2.6, 5.0, 10.0), 10.0, 10)) < anova_power(base)
        assert anova_power(PowerScenario((2.6, 5.0, 12.0), 7.5, 10)) > anova_power(base)
        assert anova_power(base.with_n(2000)) > 0.999999

    def test_central_limit_of_ncf(self):
        assert noncentral_f_sf(3.0, 2, 72, 0.0) == f.sf(3.0, 2, 72)
        assert np.isclose(noncentral_f_sf(3.0, 2, 72, 1e-10), f.sf(3.0, 2, 72))
        with pytest.raises(ValueError, match="noncentrality"):
            noncentral_f_sf(3.0, 2, 72, -1.0)


class TestRequiredN(TestCase):
    """Test the sample-size search."""

    def setUp(self):
        self.scenario = PowerScenario((2.6, 5.0, 10.0), 7.5)

    def test_ninety_percent(self):
        n = required_n(self.scenario, 0.90)
        assert 24 <= n <= 28
        assert anova_power(self.scenario.with_n(n)) >= 0.90
        assert anova_power(self.scenario.with_n(n - 1)) < 0.90

    def test_target_at_alpha(self):
        assert required_n(self.scenario, 0.05) == 2

    def test_target_at_alpha_without_effect(self):
        assert required_n(PowerScenario((1.0, 1.0, 1.0, 1.0), 2.0), 0.05) == 2

    def test_doubling_sd(self):
        n1 = required_n(self.scenario, 0.90)
        n2 = required_n(PowerScenario((2.6, 5.0, 10.0), 15.0), 0.90)
        assert 3.5 <= n2 / n1 <= 4.5

    def test_invalid_target(self):
        with pytest.raises(ValueError, match="target_power"):
            required_n(self.scenario, 1.0)
        with pytest.raises(ValueError, match="not reached"):
            required_n(PowerScenario((1.0, 1.0), 1.0), 0.5)


class TestSimulatedPower(TestCase):
    """Test the Monte Carlo F-test oracle."""

    def test_rough_agreement(self):
        s = PowerScenario((2.6, 5.0, 10.0), 7.5, 25)
        rate = simulated_power(s, 2000, seed=3)
        assert abs(rate - anova_power(s)) < 0.04
        assert simulated_power(s, 200, seed=3) == simulated_power(s, 200, seed=3)

    def test_parallel(self):
        s = PowerScenario((2.6, 5.0, 10.0), 7.5, 10)
        assert simulated_power(s, 100, seed=4) == simulated_power(s, 100, seed=4, n_jobs=2)

    def test_bad_reps(self):
        with pytest.raises(ValueError, match="n_reps"):
            simulated_power(PowerScenario((1.0, 2.0), 1.0, 5), 0)

    @pytest.mark.slow
    def test_oracle(self):
        s = PowerScenario((2.6, 5.0, 10.0), 7.5, 25)
        assert abs(simulated_power(s, 100_000, seed=1) - anova_power(s)) < 0.005
