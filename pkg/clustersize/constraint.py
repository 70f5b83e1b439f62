"""Module for the model families and the constraints that restrict them."""

from __future__ import annotations

from enum import Enum


class Family(Enum):
    """Model family, by outcome and likelihood."""

    PLA_LMM = "pla_lmm"
    LVD_POIS = "lvd_pois"
    LVD_NEGBIN = "lvd_negbin"
    VA_LMM = "va_lmm"
    CIRC_HET = "circ_het"
    VA_CONDITIONAL = "va_conditional"
    JOINT = "joint"

    @classmethod
    def parse(cls, name: str) -> Family:
        """Parse a family name as written on the command line (case-insensitive)."""
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            msg = f"unknown model family {name!r} (expected one of {valid})"
            raise ValueError(msg) from None

    @property
    def is_count(self) -> bool:
        return self in (Family.LVD_POIS, Family.LVD_NEGBIN)

    @property
    def is_gaussian(self) -> bool:
        """Gaussian LMMs, whose random effects integrate out in closed form."""
        return self in (Family.PLA_LMM, Family.VA_LMM, Family.CIRC_HET, Family.VA_CONDITIONAL)

    @property
    def has_field_effect(self) -> bool:
        return self in (Family.VA_LMM, Family.CIRC_HET, Family.VA_CONDITIONAL, Family.JOINT)

    @property
    def vessel_outcome(self) -> str | None:
        """Name of the vessel-level outcome array, if the family models one."""
        if self in (Family.VA_LMM, Family.VA_CONDITIONAL, Family.JOINT):
            return "log_area"
        if self is Family.CIRC_HET:
            return "logit_circularity"
        return None


class Constraint(Enum):
    """Parameter constraint applied on top of a family's general form."""

    RHO_ZERO = "rho_zero"
    DELTA_EQUAL = "delta_equal"

    @property
    def family(self) -> Family:
        """The only family on which this constraint is defined."""
        return _CONSTRAINT_FAMILY[self]

    @property
    def removed_block(self) -> str:
        """Parameter block that the constraint pins to its null value."""
        return "rho" if self is Constraint.RHO_ZERO else "delta"

    def check(self, family: Family) -> None:
        """Raise if the constraint is used with a family that does not define it.

        :param family: Family the constraint is attached to.
        """
        if family is not self.family:
            msg = f"constraint {self.value} is only valid for family {self.family.value}, not {family.value}"
            raise ValueError(msg)


_CONSTRAINT_FAMILY = {
    Constraint.RHO_ZERO: Family.JOINT,
    Constraint.DELTA_EQUAL: Family.CIRC_HET,
}
