from clustersize.tissue import CoarseTissue, Grouping, TissueType

from unittest import TestCase

import numpy as np
import pytest


class TestTissueType(TestCase):
    """Test tissue codes and their coarse groups."""

    def test_from_code(self):
        assert TissueType.from_code("CIN2") is TissueType.CIN2
        assert TissueType.from_code(" ecto ") is TissueType.ControlEctocervix
        with pytest.raises(ValueError, match="unknown tissue code"):
            TissueType.from_code("CIN4")

    def test_coarse(self):
        for t in (TissueType.CIN1, TissueType.CIN2, TissueType.CIN3):
            assert t.coarse is CoarseTissue.CIN
        assert TissueType.ControlTransformationZone.coarse is CoarseTissue.ControlTransformationZone
        assert TissueType.InvasiveCarcinoma.coarse is CoarseTissue.InvasiveCarcinoma

    def test_is_control(self):
        controls = [t for t in TissueType if t.is_control]
        assert controls == [TissueType.ControlEctocervix, TissueType.ControlTransformationZone]
        assert TissueType.ControlEctocervix.label == "Control ectocervix"


class TestGrouping(TestCase):
    """Test the four- and six-level tissue factors."""

    def test_levels(self):
        assert Grouping.COARSE.levels == ("ECTO", "TZ", "CIN", "CARC")
        assert Grouping.FINE.levels == ("ECTO", "TZ", "CIN1", "CIN2", "CIN3", "CARC")
        assert Grouping.COARSE.n_levels == 4
        assert Grouping.FINE.n_levels == 6
        # the reference carries no effect, carcinoma no free multiplier
        assert Grouping.COARSE.effect_levels == ("TZ", "CIN", "CARC")
        assert Grouping.COARSE.multiplier_levels == ("ECTO", "TZ", "CIN")
        assert Grouping.FINE.multiplier_levels == ("ECTO", "TZ", "CIN1", "CIN2", "CIN3")

    def test_level_of(self):
        assert Grouping.COARSE.level_of(TissueType.CIN3) == 2
        assert Grouping.FINE.level_of(TissueType.CIN3) == 4
        assert Grouping.COARSE.level_of(TissueType.ControlEctocervix) == 0
        assert Grouping.FINE.level_of(TissueType.InvasiveCarcinoma) == 5
        index = Grouping.COARSE.level_index([TissueType.CIN1, TissueType.InvasiveCarcinoma, TissueType.CIN2])
        assert np.array_equal(index, [2, 3, 2])
