"""Module for tissue categories and their grouping into design levels."""

from __future__ import annotations

from enum import Enum

import numpy as np


class CoarseTissue(Enum):
    """Four-level tissue factor used in most model fits."""

    ControlEctocervix = "ECTO"
    ControlTransformationZone = "TZ"
    CIN = "CIN"
    InvasiveCarcinoma = "CARC"

    @property
    def label(self) -> str:
        return _LABELS[self.value]


class TissueType(Enum):
    """Six-level tissue code as recorded for each field.

    The enum value is the code used in ``fields.csv``.
    """

    ControlEctocervix = "ECTO"
    ControlTransformationZone = "TZ"
    CIN1 = "CIN1"
    CIN2 = "CIN2"
    CIN3 = "CIN3"
    InvasiveCarcinoma = "CARC"

    @property
    def code(self) -> str:
        return self.value

    @property
    def coarse(self) -> CoarseTissue:
        """Return the four-level group; the three CIN grades collapse to CIN."""
        if self in (TissueType.CIN1, TissueType.CIN2, TissueType.CIN3):
            return CoarseTissue.CIN
        return CoarseTissue(self.value)

    @property
    def is_control(self) -> bool:
        return self in (TissueType.ControlEctocervix, TissueType.ControlTransformationZone)

    @property
    def label(self) -> str:
        return _LABELS[self.value]

    @classmethod
    def from_code(cls, code: str) -> TissueType:
        """Parse a ``fields.csv`` tissue code.

        :param code: One of ECTO, TZ, CIN1, CIN2, CIN3, CARC (case-insensitive).
        """
        try:
            return cls(code.strip().upper())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            msg = f"unknown tissue code {code!r} (expected one of {valid})"
            raise ValueError(msg) from None


_LABELS = {
    "ECTO": "Control ectocervix",
    "TZ": "Control transformation zone",
    "CIN": "CIN",
    "CIN1": "CIN1",
    "CIN2": "CIN2",
    "CIN3": "CIN3",
    "CARC": "Invasive carcinoma",
}


class Grouping(Enum):
    """Tissue factor used in a design matrix.

    COARSE has four levels (CIN grades pooled); FINE keeps all six codes.
    Control ectocervix is always the first level and the reference category;
    invasive carcinoma is always the last level, whose variance multiplier is
    fixed to one in the heteroscedastic circularity model.
    """

    COARSE = "coarse"
    FINE = "fine"

    @property
    def levels(self) -> tuple[str, ...]:
        if self is Grouping.COARSE:
            return tuple(t.value for t in CoarseTissue)
        return tuple(t.value for t in TissueType)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def effect_levels(self) -> tuple[str, ...]:
        """Levels carrying a fixed effect (all but the reference)."""
        return self.levels[1:]

    @property
    def multiplier_levels(self) -> tuple[str, ...]:
        """Levels carrying a free variance multiplier (all but carcinoma)."""
        return self.levels[:-1]

    def level_of(self, tissue: TissueType) -> int:
        """Return the level index of a tissue code under this grouping."""
        key = tissue.coarse.value if self is Grouping.COARSE else tissue.value
        return self.levels.index(key)

    def level_index(self, tissues: list[TissueType] | tuple[TissueType, ...]) -> np.ndarray:
        """Vectorised :meth:`level_of`."""
        return np.array([self.level_of(t) for t in tissues], dtype=np.intp)
