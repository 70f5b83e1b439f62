from clustersize.constraint import Constraint, Family
from clustersize.errors import ModelSpecError, SimulationWarning
from clustersize.params import ModelSpec
from clustersize.simulate import DesignPreset, TrueParams, simulate_dataset, simulate_power_scenario, study_truth
from clustersize.tissue import Grouping, TissueType

from unittest import TestCase

import math
import numpy as np
import pytest


class TestDesignPreset(TestCase):
    """Test the study design presets."""

    def test_table1(self):
        design = DesignPreset.table1()
        assert design.n_specimens == 62
        assert len(design.expand()) == 62
        labels = [t.label for t in design.templates]
        assert labels[0] == "control_both"
        assert sum(t.count for t in design.templates if t.label.startswith("control")) == 21

    def test_named(self):
        assert DesignPreset.named("table1").name == "table1"
        balanced = DesignPreset.named("balanced_2x3")
        assert balanced.n_specimens == 12
        assert all(t.blocks[0][1:] == (3, 3) for t in balanced.templates)
        with pytest.raises(ValueError, match="unknown design preset"):
            DesignPreset.named("table2")
        with pytest.raises(ValueError):
            DesignPreset.named("balanced_0x3")


class TestSimulateDataset(TestCase):
    """Test dataset simulation from each family."""

    def setUp(self):
        self.truth = study_truth(Family.JOINT)

    def test_table1_layout(self):
        d = simulate_dataset(self.truth.spec, self.truth, DesignPreset.table1(), seed=1)
        assert d.n_specimens == 62
        assert all(f.lvd >= 1 for s in d.specimens for f in s.fields)
        both = [s for s in d.specimens if {f.tissue for f in s.fields} == {
            TissueType.ControlEctocervix, TissueType.ControlTransformationZone}]
        assert len(both) == 15
        for s in both:
            n_ecto = sum(f.tissue is TissueType.ControlEctocervix for f in s.fields)
            assert 5 <= n_ecto <= 10

    def test_deterministic(self):
        design = DesignPreset.balanced(2, 3, tuple(TissueType))
        d1 = simulate_dataset(self.truth.spec, self.truth, design, seed=7)
        d2 = simulate_dataset(self.truth.spec, self.truth, design, seed=7)
        d3 = simulate_dataset(self.truth.spec, self.truth, design, seed=8)
        assert d1 == d2
        assert d1 != d3

    def test_parallel_matches_sequential(self):
        design = DesignPreset.balanced(2, 3, tuple(TissueType))
        d1 = simulate_dataset(self.truth.spec, self.truth, design, seed=7)
        d2 = simulate_dataset(self.truth.spec, self.truth, design, seed=7, n_jobs=2)
        assert d1 == d2

    def test_truth_mismatch(self):
        design = DesignPreset.balanced(1, 1)
        with pytest.raises(ModelSpecError, match="truth was built for"):
            simulate_dataset(ModelSpec(Family.VA_LMM), self.truth, design, seed=1)
        bad = TrueParams(self.truth.spec, self.truth.theta.replace(sigma2=-1.0))
        with pytest.raises(ModelSpecError, match="sigma2"):
            simulate_dataset(bad.spec, bad, design, seed=1)

    def test_poisson_mean(self):
        truth = study_truth(Family.LVD_POIS)
        design = DesignPreset.balanced(200, 5)
        d = simulate_dataset(truth.spec, truth, design, seed=3)
        excess = d.arrays.lvd - 1.0
        expected = math.exp(truth.theta.scalar("alpha") + 0.5 * truth.theta.scalar("tau2"))
        assert abs(excess.mean() - expected) < 0.15

    def test_clipped_pla_warns(self):
        truth = study_truth(Family.PLA_LMM)
        with pytest.warns(SimulationWarning, match="clipped"):
            d = simulate_dataset(truth.spec, truth, DesignPreset.table1(), seed=1)
        assert np.all(d.arrays.pla >= 0.0)

    def test_values_rounded(self):
        design = DesignPreset.balanced(1, 2, tuple(TissueType))
        d = simulate_dataset(self.truth.spec, self.truth, design, seed=2)
        for s in d.specimens:
            for f in s.fields:
                for v in f.vessels:
                    assert float(f"{v.area:.6g}") == v.area
                    assert 0.0 < v.circularity < 1.0


class TestStudyTruth(TestCase):
    """Test the study-derived generating values."""

    def test_joint(self):
        truth = study_truth(Family.JOINT)
        assert truth.theta.scalar("lambda_a") == 0.25
        assert truth.theta.scalar("lambda_n") == -0.13
        assert truth.theta.scalar("rho") == -0.78
        independent = study_truth(Family.JOINT, rho_zero=True)
        assert independent.spec.has(Constraint.RHO_ZERO)
        assert "rho" not in independent.theta

    def test_families(self):
        for family in Family:
            truth = study_truth(family)
            truth.validate()
            fine = study_truth(family, Grouping.FINE)
            fine.validate()
        assert np.isclose(study_truth(Family.VA_CONDITIONAL).theta.scalar("gamma"), math.log(19.7))
        assert study_truth(Family.CIRC_HET, Grouping.FINE).theta["delta"].size == 5

    def test_to_dict(self):
        truth = study_truth(Family.VA_LMM)
        with_pla = TrueParams(truth.spec, truth.theta, pla=study_truth(Family.PLA_LMM).theta)
        out = with_pla.to_dict()
        assert out["spec"]["family"] == "va_lmm"
        assert out["theta"]["sigma2"] == 1.02
        assert out["pla"]["tau2"] == 1.2


class TestPowerScenarioSample(TestCase):
    """Test the one-way layout sampler."""

    def test_shape(self):
        sample = simulate_power_scenario((2.6, 5.0, 10.0), 7.5, 25, seed=1)
        assert sample.values.size == 75
        groups = sample.by_group()
        assert [g.size for g in groups] == [25, 25, 25]
        again = simulate_power_scenario((2.6, 5.0, 10.0), 7.5, 25, seed=1)
        assert np.array_equal(sample.values, again.values)

    def test_errors(self):
        with pytest.raises(ValueError, match="two groups"):
            simulate_power_scenario((1.0,), 1.0, 5, seed=1)
        with pytest.raises(ValueError, match="within_sd"):
            simulate_power_scenario((1.0, 2.0), 0.0, 5, seed=1)
        with pytest.raises(ValueError, match="n_per_group"):
            simulate_power_scenario((1.0, 2.0), 1.0, 1, seed=1)
