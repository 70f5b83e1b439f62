"""Module for model specifications, parameter vectors, latent states and priors."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit, logit

from clustersize.constraint import Constraint, Family
from clustersize.errors import ModelSpecError
from clustersize.tissue import Grouping


@dataclass(frozen=True)
class PriorSpec:
    """Vague priors of the Bayesian fits.

    :param fixed_precision: Precision of the N(0, 1/precision) prior on every
        intercept, tissue effect and γ.
    :param gamma_shape: Shape of the Gamma prior on each precision (1/variance).
    :param gamma_rate: Rate of the Gamma prior on each precision.
    :param lambda_bound: Loadings are Uniform(-bound, bound).
    :param rho_bound: ρ is Uniform(-bound, bound); must stay inside (0, 1).
    """

    fixed_precision: float = 1e-6
    gamma_shape: float = 1e-3
    gamma_rate: float = 1e-3
    lambda_bound: float = 10.0
    rho_bound: float = 0.95

    def __post_init__(self) -> None:
        for name in ("fixed_precision", "gamma_shape", "gamma_rate", "lambda_bound"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                msg = f"{name} must be positive and finite, got {value}"
                raise ValueError(msg)
        if not 0.0 < self.rho_bound < 1.0:
            msg = f"rho_bound must lie strictly inside (0, 1), got {self.rho_bound}"
            raise ValueError(msg)

    def scaled(self, factor: float) -> PriorSpec:
        """Return priors with every hyperparameter multiplied by ``factor`` (bounds kept)."""
        return replace(
            self,
            fixed_precision=self.fixed_precision * factor,
            gamma_shape=self.gamma_shape * factor,
            gamma_rate=self.gamma_rate * factor,
        )


DEFAULT_PRIORS = PriorSpec()


@dataclass(frozen=True)
class ParamBlock:
    """A named block of parameters sharing a support and a transform."""

    name: str
    labels: tuple[str, ...]
    kind: str
    lower: float = -np.inf
    upper: float = np.inf

    @property
    def size(self) -> int:
        return len(self.labels)

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "positive":
            return np.log(x)
        if self.kind == "bounded":
            return logit((x - self.lower) / (self.upper - self.lower))
        return np.array(x, dtype=float)

    def from_unconstrained(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "positive":
            return np.exp(u)
        if self.kind == "bounded":
            return self.lower + (self.upper - self.lower) * expit(u)
        return np.array(u, dtype=float)

    def log_jacobian(self, u: np.ndarray) -> float:
        """log |dx/du| summed over the block."""
        if self.kind == "positive":
            return float(np.sum(u))
        if self.kind == "bounded":
            return float(np.sum(np.log(self.upper - self.lower) + log_expit(u) + log_expit(-u)))
        return 0.0

    def in_support(self, x: np.ndarray) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if self.kind == "positive":
            return bool(np.all(x > 0.0))
        if self.kind == "bounded":
            return bool(np.all((x > self.lower) & (x < self.upper)))
        return True


@dataclass(frozen=True)
class ModelSpec:
    """Which model to fit: family, tissue grouping and constraints.

    :param family: Model family.
    :param grouping: Four-level (COARSE) or six-level (FINE) tissue factor.
    :param constraints: Constraints pinning parameters of the general model.
    :param delta_grouping: Tissue factor of the circularity variance
        multipliers when it differs from ``grouping`` (e.g. one δ per CIN grade
        with pooled CIN effects).
    """

    family: Family
    grouping: Grouping = Grouping.COARSE
    constraints: frozenset[Constraint] = field(default_factory=frozenset)
    delta_grouping: Grouping | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "constraints", frozenset(self.constraints))
        for constraint in self.constraints:
            try:
                constraint.check(self.family)
            except ValueError as err:
                raise ModelSpecError(str(err)) from None
        if self.delta_grouping is not None and self.family is not Family.CIRC_HET:
            msg = f"delta_grouping is only valid for family circ_het, not {self.family.value}"
            raise ModelSpecError(msg)

    @property
    def multiplier_grouping(self) -> Grouping:
        return self.delta_grouping or self.grouping

    def has(self, constraint: Constraint) -> bool:
        return constraint in self.constraints

    def without_constraints(self) -> ModelSpec:
        return replace(self, constraints=frozenset())

    def with_constraint(self, constraint: Constraint) -> ModelSpec:
        return replace(self, constraints=self.constraints | {constraint})

    def layout(self, priors: PriorSpec = DEFAULT_PRIORS) -> Layout:
        """Ordered parameter blocks of this model."""
        effects = self.grouping.effect_levels
        fam = self.family
        blocks: list[ParamBlock] = []
        if fam is Family.JOINT:
            lam = priors.lambda_bound
            blocks += [
                ParamBlock("alpha_a", ("alpha_a",), "real"),
                ParamBlock("beta_a", tuple(f"beta_a[{lv}]" for lv in effects), "real"),
                ParamBlock("alpha_n", ("alpha_n",), "real"),
                ParamBlock("beta_n", tuple(f"beta_n[{lv}]" for lv in effects), "real"),
                ParamBlock("lambda_a", ("lambda_a",), "bounded", -lam, lam),
                ParamBlock("lambda_n", ("lambda_n",), "bounded", -lam, lam),
                ParamBlock("nu2", ("nu2",), "positive"),
                ParamBlock("sigma2", ("sigma2",), "positive"),
            ]
            if not self.has(Constraint.RHO_ZERO):
                rb = priors.rho_bound
                blocks.append(ParamBlock("rho", ("rho",), "bounded", -rb, rb))
            return Layout(tuple(blocks))
        blocks += [
            ParamBlock("alpha", ("alpha",), "real"),
            ParamBlock("beta", tuple(f"beta[{lv}]" for lv in effects), "real"),
        ]
        if fam is Family.VA_CONDITIONAL:
            blocks.append(ParamBlock("gamma", ("gamma",), "real"))
        blocks.append(ParamBlock("tau2", ("tau2",), "positive"))
        if fam.has_field_effect:
            blocks.append(ParamBlock("nu2", ("nu2",), "positive"))
        if fam is not Family.LVD_POIS and fam is not Family.LVD_NEGBIN:
            blocks.append(ParamBlock("sigma2", ("sigma2",), "positive"))
        if fam is Family.CIRC_HET and not self.has(Constraint.DELTA_EQUAL):
            levels = self.multiplier_grouping.multiplier_levels
            blocks.append(ParamBlock("delta", tuple(f"delta[{lv}]" for lv in levels), "positive"))
        if fam is Family.LVD_NEGBIN:
            blocks.append(ParamBlock("dispersion", ("dispersion",), "positive"))
        return Layout(tuple(blocks))

    def describe(self) -> dict:
        return {
            "family": self.family.value,
            "grouping": self.grouping.value,
            "constraints": sorted(c.value for c in self.constraints),
            **({"delta_grouping": self.delta_grouping.value} if self.delta_grouping else {}),
        }


@dataclass(frozen=True)
class Layout:
    """Flat packing of a ParamVector, with unconstrained reparameterisation."""

    blocks: tuple[ParamBlock, ...]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(label for b in self.blocks for label in b.labels)

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def block(self, name: str) -> ParamBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        msg = f"no parameter block {name!r} in this model"
        raise KeyError(msg)

    def slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    def pack(self, theta: ParamVector) -> np.ndarray:
        return np.concatenate([theta[b.name] for b in self.blocks]) if self.blocks else np.zeros(0)

    def unpack(self, x: np.ndarray) -> ParamVector:
        x = np.asarray(x, dtype=float)
        return ParamVector({name: x[sl] for name, sl in self.slices().items()})

    def to_unconstrained(self, theta: ParamVector) -> np.ndarray:
        return np.concatenate([b.to_unconstrained(theta[b.name]) for b in self.blocks])

    def from_unconstrained(self, u: np.ndarray) -> ParamVector:
        u = np.asarray(u, dtype=float)
        sl = self.slices()
        return ParamVector({b.name: b.from_unconstrained(u[sl[b.name]]) for b in self.blocks})

    def log_jacobian(self, u: np.ndarray) -> float:
        sl = self.slices()
        return sum(b.log_jacobian(u[sl[b.name]]) for b in self.blocks)


class ParamVector:
    """Named parameter set for one model.

    Every block is stored as a read-only 1-D float array; scalars have size 1.
    Block names: ``alpha``, ``beta``, ``gamma``, ``tau2``, ``nu2``, ``sigma2``,
    ``delta``, ``dispersion`` for univariate families and ``alpha_a``,
    ``beta_a``, ``alpha_n``, ``beta_n``, ``lambda_a``, ``lambda_n``, ``nu2``,
    ``sigma2``, ``rho`` for the joint model. The carcinoma variance multiplier
    is never stored (it is fixed at one).
    """

    def __init__(self, values: Mapping[str, Iterable[float] | float] | None = None, **blocks) -> None:
        merged = dict(values or {})
        merged.update(blocks)
        self._values: dict[str, np.ndarray] = {}
        for name, value in merged.items():
            arr = np.atleast_1d(np.array(value, dtype=float)).ravel()
            arr.flags.writeable = False
            self._values[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            msg = f"parameter block {name!r} not present"
            raise KeyError(msg) from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self._values.keys() == other._values.keys() and all(
            np.array_equal(self._values[k], other._values[k]) for k in self._values
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v.tolist()}" for k, v in self._values.items())
        return f"ParamVector({inner})"

    def scalar(self, name: str) -> float:
        return float(self[name][0])

    def get(self, name: str, default: float | None = None) -> np.ndarray | None:
        if name in self._values:
            return self._values[name]
        return None if default is None else np.atleast_1d(np.array(default, dtype=float))

    def replace(self, **blocks) -> ParamVector:
        merged = dict(self._values)
        merged.update(blocks)
        return ParamVector(merged)

    def to_dict(self) -> dict[str, float | list[float]]:
        return {k: (float(v[0]) if v.size == 1 and not k.startswith(("beta", "delta")) else v.tolist())
                for k, v in self._values.items()}

    def validate(self, spec: ModelSpec, priors: PriorSpec = DEFAULT_PRIORS) -> None:
        """Check that blocks match ``spec`` and lie in their support.

        :raises ModelSpecError: on missing/extra blocks, wrong sizes or values
            outside the support.
        """
        layout = spec.layout(priors)
        expected = set(layout.block_names)
        present = set(self._values)
        missing = expected - present
        if missing:
            msg = f"{spec.family.value}: missing parameter(s) {sorted(missing)}"
            raise ModelSpecError(msg)
        extra = present - expected
        if extra:
            msg = f"{spec.family.value}: unexpected parameter(s) {sorted(extra)}"
            raise ModelSpecError(msg)
        for b in layout.blocks:
            value = self._values[b.name]
            if value.size != b.size:
                msg = f"{b.name}: expected {b.size} value(s), got {value.size}"
                raise ModelSpecError(msg)
            if not b.in_support(value):
                msg = f"{b.name}={value.tolist()} is outside its support ({b.kind})"
                raise ModelSpecError(msg)


@dataclass(frozen=True)
class LatentState:
    """Random effects: ``a`` per specimen (shape (m,) or (m, 2) for JOINT), ``b`` per field."""

    a: np.ndarray
    b: np.ndarray | None = None

    @classmethod
    def zeros(cls, spec: ModelSpec, n_specimens: int, n_fields: int) -> LatentState:
        a = np.zeros((n_specimens, 2)) if spec.family is Family.JOINT else np.zeros(n_specimens)
        b = np.zeros(n_fields) if spec.family.has_field_effect else None
        return cls(a, b)

    def check(self, spec: ModelSpec, n_specimens: int, n_fields: int) -> None:
        """Raise ModelSpecError if dimensions do not match the data and family."""
        want_a = (n_specimens, 2) if spec.family is Family.JOINT else (n_specimens,)
        if np.shape(self.a) != want_a:
            msg = f"specimen effects have shape {np.shape(self.a)}, expected {want_a}"
            raise ModelSpecError(msg)
        if spec.family.has_field_effect:
            if self.b is None or np.shape(self.b) != (n_fields,):
                got = None if self.b is None else np.shape(self.b)
                msg = f"field effects have shape {got}, expected ({n_fields},)"
                raise ModelSpecError(msg)
