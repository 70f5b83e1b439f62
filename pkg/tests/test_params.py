from clustersize.constraint import Constraint, Family
from clustersize.errors import ModelSpecError
from clustersize.params import DEFAULT_PRIORS, LatentState, ModelSpec, ParamBlock, ParamVector, PriorSpec
from clustersize.simulate import study_truth
from clustersize.tissue import Grouping

from unittest import TestCase

import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st


class TestModelSpec(TestCase):
    """Test model specifications and their parameter layouts."""

    def test_constraint_family_mismatch(self):
        with pytest.raises(ModelSpecError, match="rho_zero"):
            ModelSpec(Family.VA_LMM, constraints={Constraint.RHO_ZERO})
        with pytest.raises(ModelSpecError, match="delta_grouping"):
            ModelSpec(Family.JOINT, delta_grouping=Grouping.FINE)

    def test_joint_layout(self):
        spec = ModelSpec(Family.JOINT)
        layout = spec.layout()
        assert layout.block_names == (
            "alpha_a", "beta_a", "alpha_n", "beta_n", "lambda_a", "lambda_n", "nu2", "sigma2", "rho",
        )
        assert layout.size == 1 + 3 + 1 + 3 + 5
        assert "beta_n[CARC]" in layout.names
        assert layout.block("rho").upper == DEFAULT_PRIORS.rho_bound
        assert layout.block("lambda_a").lower == -10.0
        constrained = spec.with_constraint(Constraint.RHO_ZERO)
        assert "rho" not in constrained.layout().block_names
        assert constrained.without_constraints() == spec

    def test_univariate_layouts(self):
        assert ModelSpec(Family.PLA_LMM).layout().block_names == ("alpha", "beta", "tau2", "sigma2")
        assert ModelSpec(Family.LVD_POIS).layout().block_names == ("alpha", "beta", "tau2")
        assert ModelSpec(Family.LVD_NEGBIN).layout().block_names == ("alpha", "beta", "tau2", "dispersion")
        assert ModelSpec(Family.VA_CONDITIONAL).layout().block_names == (
            "alpha", "beta", "gamma", "tau2", "nu2", "sigma2",
        )
        circ = ModelSpec(Family.CIRC_HET).layout()
        assert circ.names[-3:] == ("delta[ECTO]", "delta[TZ]", "delta[CIN]")
        fine = ModelSpec(Family.CIRC_HET, Grouping.FINE).layout()
        assert fine.block("beta").size == 5
        assert fine.block("delta").size == 5
        split = ModelSpec(Family.CIRC_HET, delta_grouping=Grouping.FINE).layout()
        assert split.block("beta").size == 3
        assert split.block("delta").labels[2:] == ("delta[CIN1]", "delta[CIN2]", "delta[CIN3]")
        equal = ModelSpec(Family.CIRC_HET, constraints={Constraint.DELTA_EQUAL}).layout()
        assert "delta" not in equal.block_names

    def test_describe(self):
        spec = ModelSpec(Family.JOINT, Grouping.FINE, {Constraint.RHO_ZERO})
        assert spec.describe() == {"family": "joint", "grouping": "fine", "constraints": ["rho_zero"]}
        assert ModelSpec(Family.CIRC_HET, delta_grouping=Grouping.FINE).describe()["delta_grouping"] == "fine"


class TestParamVector(TestCase):
    """Test named parameter vectors and their validation."""

    def setUp(self):
        self.truth = study_truth(Family.JOINT)

    def test_access(self):
        theta = self.truth.theta
        assert theta.scalar("rho") == -0.78
        assert theta["beta_a"].size == 3
        assert "rho" in theta
        assert theta.get("tau2") is None
        with pytest.raises(KeyError, match="tau2"):
            theta["tau2"]
        with pytest.raises(ValueError):
            theta["beta_a"][0] = 1.0  # read-only

    def test_replace_and_equality(self):
        theta = self.truth.theta
        other = theta.replace(rho=0.1)
        assert other.scalar("rho") == 0.1
        assert theta.scalar("rho") == -0.78
        assert theta == ParamVector(theta.to_dict())
        assert theta != other

    def test_validate(self):
        spec = self.truth.spec
        self.truth.theta.validate(spec)
        with pytest.raises(ModelSpecError, match="missing"):
            ParamVector(alpha_a=1.0).validate(spec)
        with pytest.raises(ModelSpecError, match="unexpected"):
            self.truth.theta.replace(tau2=1.0).validate(spec)
        with pytest.raises(ModelSpecError, match="outside its support"):
            self.truth.theta.replace(rho=0.99).validate(spec)
        with pytest.raises(ModelSpecError, match="expected 3 value"):
            self.truth.theta.replace(beta_a=[0.0, 0.0]).validate(spec)

    def test_pack_unpack(self):
        layout = self.truth.spec.layout()
        x = layout.pack(self.truth.theta)
        assert x.size == layout.size
        assert layout.unpack(x) == self.truth.theta


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8.0, 8.0), min_size=13, max_size=13))
def test_unconstrained_roundtrip(values):
    layout = ModelSpec(Family.JOINT).layout()
    u = np.array(values)
    theta = layout.from_unconstrained(u)
    theta.validate(ModelSpec(Family.JOINT))
    assert np.allclose(layout.to_unconstrained(theta), u, atol=1e-6)


def test_log_jacobian():
    block = ParamBlock("rho", ("rho",), "bounded", -0.95, 0.95)
    u = np.array([0.3])
    step = 1e-6
    deriv = (block.from_unconstrained(u + step) - block.from_unconstrained(u - step)) / (2 * step)
    assert np.isclose(block.log_jacobian(u), math.log(deriv[0]))
    positive = ParamBlock("tau2", ("tau2",), "positive")
    assert np.isclose(positive.log_jacobian(np.array([0.7])), 0.7)


def test_prior_spec():
    assert DEFAULT_PRIORS.fixed_precision == 1e-6
    scaled = DEFAULT_PRIORS.scaled(10.0)
    assert np.isclose(scaled.gamma_shape, 1e-2)
    assert scaled.rho_bound == DEFAULT_PRIORS.rho_bound
    with pytest.raises(ValueError, match="rho_bound"):
        PriorSpec(rho_bound=1.0)
    with pytest.raises(ValueError, match="gamma_rate"):
        PriorSpec(gamma_rate=0.0)


def test_latent_state():
    spec = ModelSpec(Family.JOINT)
    latent = LatentState.zeros(spec, 4, 9)
    assert latent.a.shape == (4, 2)
    latent.check(spec, 4, 9)
    with pytest.raises(ModelSpecError, match="field effects"):
        latent.check(spec, 4, 8)
    assert LatentState.zeros(ModelSpec(Family.LVD_POIS), 4, 9).b is None
