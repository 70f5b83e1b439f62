"""Small hand-built and simulated datasets shared by the tests."""

import numpy as np

from clustersize.dataset import Dataset, Field, Specimen, Vessel
from clustersize.params import ModelSpec
from clustersize.simulate import DesignPreset, simulate_dataset, study_truth
from clustersize.tissue import Grouping, TissueType


def make_field(field_id, tissue, areas, circularity=0.5, pla=2.0):
    vessels = tuple(Vessel(f"V{k + 1:02d}", float(a), circularity) for k, a in enumerate(areas))
    return Field(field_id, tissue, pla, vessels)


def tiny_dataset():
    """Three specimens: control (ECTO + TZ), CIN2 and carcinoma."""
    ecto, tz = TissueType.ControlEctocervix, TissueType.ControlTransformationZone
    return Dataset(
        (
            Specimen(
                "S1",
                (
                    make_field("F1", ecto, [900.0, 1200.0], pla=3.0),
                    make_field("F2", ecto, [800.0, 1100.0, 1500.0], pla=2.5),
                    make_field("F3", tz, [1000.0], pla=4.0),
                ),
            ),
            Specimen(
                "S2",
                (
                    make_field("F1", TissueType.CIN2, [500.0, 700.0, 650.0, 400.0], pla=3.5),
                    make_field("F2", TissueType.CIN2, [450.0, 600.0], circularity=0.6, pla=2.0),
                ),
            ),
            Specimen(
                "S3",
                (
                    make_field("F1", TissueType.InvasiveCarcinoma, [300.0, 250.0, 280.0, 350.0, 310.0], pla=1.5),
                    make_field("F2", TissueType.InvasiveCarcinoma, [200.0, 330.0, 260.0], circularity=0.4, pla=1.0),
                ),
            ),
        )
    )


def simulated(family, seed=1, design=None, grouping=Grouping.COARSE):
    """Dataset drawn from the study-derived truth of ``family``."""
    truth = study_truth(family, grouping)
    design = design or DesignPreset.balanced(6, 4, tuple(TissueType))
    return simulate_dataset(truth.spec, truth, design, seed), truth


def spec_of(family, grouping=Grouping.COARSE, **kwargs):
    return ModelSpec(family, grouping, **kwargs)


def random_points(spec, rng, n_points=3, scale=0.1):
    """Parameter vectors scattered around the study-derived truth on the unconstrained scale."""
    layout = spec.layout()
    base = layout.to_unconstrained(study_truth(spec.family, spec.grouping, "rho" not in layout.block_names).theta)
    return [layout.from_unconstrained(base + scale * rng.standard_normal(base.size)) for _ in range(n_points)]
