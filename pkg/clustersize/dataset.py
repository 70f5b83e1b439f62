"""Module for the specimen/field/vessel hierarchy, its CSV form and exploratory summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logit

from clustersize.errors import DataValidationError
from clustersize.tissue import CoarseTissue, Grouping, TissueType

logger = logging.getLogger(__name__)

FIELD_COLUMNS = ("specimen_id", "field_id", "tissue", "pla")
VESSEL_COLUMNS = ("specimen_id", "field_id", "vessel_id", "area", "circularity")
FLOAT_FORMAT = "%.6g"


@dataclass(frozen=True)
class Vessel:
    """One lymphatic vessel: lumen area in µm² and circularity in (0, 1)."""

    vessel_id: str
    area: float
    circularity: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.area) and self.area > 0.0):
            msg = f"vessel {self.vessel_id}: area must be positive, got {self.area}"
            raise ValueError(msg)
        if not (0.0 < self.circularity < 1.0):
            msg = f"vessel {self.vessel_id}: circularity must lie in (0, 1), got {self.circularity}"
            raise ValueError(msg)


@dataclass(frozen=True)
class Field:
    """A microscope field; its LVD is the number of vessels it holds."""

    field_id: str
    tissue: TissueType
    pla: float
    vessels: tuple[Vessel, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "vessels", tuple(self.vessels))
        if not self.vessels:
            msg = f"field {self.field_id} has no vessels"
            raise ValueError(msg)
        if not (np.isfinite(self.pla) and self.pla >= 0.0):
            msg = f"field {self.field_id}: %LA must be a nonnegative number, got {self.pla}"
            raise ValueError(msg)
        ids = [v.vessel_id for v in self.vessels]
        if len(set(ids)) != len(ids):
            msg = f"field {self.field_id} has duplicate vessel identifiers"
            raise ValueError(msg)

    @property
    def lvd(self) -> int:
        return len(self.vessels)


@dataclass(frozen=True)
class Specimen:
    """A tissue specimen (one individual) and its fields."""

    specimen_id: str
    fields: tuple[Field, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            msg = f"specimen {self.specimen_id} has no fields"
            raise ValueError(msg)
        ids = [f.field_id for f in self.fields]
        if len(set(ids)) != len(ids):
            msg = f"specimen {self.specimen_id} has duplicate field identifiers"
            raise ValueError(msg)
        tissues = {f.tissue for f in self.fields}
        if len(tissues) > 1 and not all(t.is_control for t in tissues):
            msg = (
                f"specimen {self.specimen_id} mixes tissue codes "
                f"{sorted(t.value for t in tissues)}; only control specimens may"
            )
            raise ValueError(msg)


@dataclass(frozen=True)
class DataArrays:
    """Flat, canonically ordered arrays of a Dataset used by all model kernels.

    Specimens, fields within specimen and vessels within field are sorted by
    identifier, so any permutation of the same Dataset gives identical arrays.
    """

    specimen_ids: tuple[str, ...]
    field_keys: tuple[tuple[str, str], ...]
    field_specimen: np.ndarray
    field_tissue: tuple[TissueType, ...]
    pla: np.ndarray
    lvd: np.ndarray
    vessel_field: np.ndarray
    vessel_specimen: np.ndarray
    log_area: np.ndarray
    logit_circularity: np.ndarray

    @property
    def n_specimens(self) -> int:
        return len(self.specimen_ids)

    @property
    def n_fields(self) -> int:
        return len(self.field_keys)

    @property
    def n_vessels(self) -> int:
        return len(self.vessel_field)

    def specimen_field_starts(self) -> np.ndarray:
        """Index of each specimen's first field (fields are contiguous per specimen)."""
        return np.flatnonzero(np.r_[True, np.diff(self.field_specimen) != 0])

    def field_level(self, grouping: Grouping) -> np.ndarray:
        """Level index (under ``grouping``) of every field."""
        return grouping.level_index(self.field_tissue)

    def levels_present(self, grouping: Grouping) -> np.ndarray:
        """Boolean mask over ``grouping.levels`` of levels observed in the data."""
        present = np.zeros(grouping.n_levels, dtype=bool)
        present[np.unique(self.field_level(grouping))] = True
        return present


@dataclass(frozen=True)
class Dataset:
    """Three-level hierarchy of specimens, fields and vessels. Immutable."""

    specimens: tuple[Specimen, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "specimens", tuple(self.specimens))
        ids = [s.specimen_id for s in self.specimens]
        if len(set(ids)) != len(ids):
            msg = "duplicate specimen identifiers"
            raise ValueError(msg)

    @property
    def n_specimens(self) -> int:
        return len(self.specimens)

    @property
    def n_fields(self) -> int:
        return sum(len(s.fields) for s in self.specimens)

    @property
    def n_vessels(self) -> int:
        return sum(f.lvd for s in self.specimens for f in s.fields)

    @cached_property
    def arrays(self) -> DataArrays:
        """Canonical flat arrays (computed once, shared by every fitter)."""
        specimen_ids = []
        field_keys = []
        field_specimen = []
        field_tissue = []
        pla = []
        lvd = []
        vessel_field = []
        vessel_specimen = []
        area = []
        circ = []
        for i, spec in enumerate(sorted(self.specimens, key=lambda s: s.specimen_id)):
            specimen_ids.append(spec.specimen_id)
            for fld in sorted(spec.fields, key=lambda f: f.field_id):
                j = len(field_keys)
                field_keys.append((spec.specimen_id, fld.field_id))
                field_specimen.append(i)
                field_tissue.append(fld.tissue)
                pla.append(fld.pla)
                lvd.append(fld.lvd)
                for ves in sorted(fld.vessels, key=lambda v: v.vessel_id):
                    vessel_field.append(j)
                    vessel_specimen.append(i)
                    area.append(ves.area)
                    circ.append(ves.circularity)
        return DataArrays(
            specimen_ids=tuple(specimen_ids),
            field_keys=tuple(field_keys),
            field_specimen=np.array(field_specimen, dtype=np.intp),
            field_tissue=tuple(field_tissue),
            pla=np.array(pla, dtype=float),
            lvd=np.array(lvd, dtype=np.int64),
            vessel_field=np.array(vessel_field, dtype=np.intp),
            vessel_specimen=np.array(vessel_specimen, dtype=np.intp),
            log_area=np.log(np.array(area, dtype=float)),
            logit_circularity=logit(np.array(circ, dtype=float)),
        )


def _read_table(path: Path, columns: tuple[str, ...]) -> pd.DataFrame:
    if not path.is_file():
        msg = f"input file not found: {path}"
        raise FileNotFoundError(msg)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataValidationError(f"missing column(s) {missing}", source=path.name, row=1)
    return frame


def _parse_float(text: str, what: str, source: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"{what} is not a number: {text!r}", source, row) from None
    if not np.isfinite(value):
        raise DataValidationError(f"{what} is not finite: {text!r}", source, row)
    return value


def load_dataset(fields_path: str | Path, vessels_path: str | Path) -> Dataset:
    """Read and validate a dataset stored as ``fields.csv`` + ``vessels.csv``.

    :param fields_path: Path to the field table (``specimen_id,field_id,tissue,pla``).
    :param vessels_path: Path to the vessel table
        (``specimen_id,field_id,vessel_id,area,circularity``).
    :raises DataValidationError: on any schema or value violation, with the row number.
    """
    fields_path, vessels_path = Path(fields_path), Path(vessels_path)
    fields_frame = _read_table(fields_path, FIELD_COLUMNS)
    vessels_frame = _read_table(vessels_path, VESSEL_COLUMNS)
    fsrc, vsrc = fields_path.name, vessels_path.name

    field_rows: dict[tuple[str, str], tuple[int, TissueType, float]] = {}
    for offset, rec in enumerate(fields_frame.itertuples(index=False)):
        row = offset + 2
        sid, fid = rec.specimen_id.strip(), rec.field_id.strip()
        if not sid or not fid:
            raise DataValidationError("missing specimen_id or field_id", fsrc, row)
        key = (sid, fid)
        if key in field_rows:
            raise DataValidationError(f"duplicate field key {key}", fsrc, row)
        try:
            tissue = TissueType.from_code(rec.tissue)
        except ValueError as err:
            raise DataValidationError(str(err), fsrc, row) from None
        pla = _parse_float(rec.pla, "pla", fsrc, row)
        if pla < 0.0:
            raise DataValidationError(f"pla must be nonnegative, got {pla}", fsrc, row)
        field_rows[key] = (row, tissue, pla)

    vessels_by_field: dict[tuple[str, str], list[Vessel]] = {key: [] for key in field_rows}
    seen_vessels: set[tuple[str, str, str]] = set()
    for offset, rec in enumerate(vessels_frame.itertuples(index=False)):
        row = offset + 2
        key = (rec.specimen_id.strip(), rec.field_id.strip())
        vid = rec.vessel_id.strip()
        if not vid:
            raise DataValidationError("missing vessel_id", vsrc, row)
        if key not in field_rows:
            raise DataValidationError(f"orphan vessel row: no field {key}", vsrc, row)
        if (*key, vid) in seen_vessels:
            raise DataValidationError(f"duplicate vessel key {(*key, vid)}", vsrc, row)
        seen_vessels.add((*key, vid))
        area = _parse_float(rec.area, "area", vsrc, row)
        if area <= 0.0:
            raise DataValidationError(f"area must be positive, got {area}", vsrc, row)
        circ = _parse_float(rec.circularity, "circularity", vsrc, row)
        if not 0.0 < circ < 1.0:
            raise DataValidationError(f"circularity must lie in (0, 1), got {circ}", vsrc, row)
        vessels_by_field[key].append(Vessel(vid, area, circ))

    specimens: dict[str, list[Field]] = {}
    for key, (row, tissue, pla) in field_rows.items():
        vessels = vessels_by_field[key]
        if not vessels:
            raise DataValidationError(f"field {key} has no vessel rows (LVD must be >= 1)", fsrc, row)
        specimens.setdefault(key[0], []).append(Field(key[1], tissue, pla, tuple(vessels)))
    try:
        dataset = Dataset(tuple(Specimen(sid, tuple(flds)) for sid, flds in specimens.items()))
    except ValueError as err:
        raise DataValidationError(str(err), fsrc) from None
    logger.info(
        "loaded %d specimens, %d fields, %d vessels",
        dataset.n_specimens,
        dataset.n_fields,
        dataset.n_vessels,
    )
    return dataset


def write_dataset(d: Dataset, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``fields.csv`` and ``vessels.csv`` (6 significant digits, UTF-8, LF).

    :param d: Dataset to write.
    :param out_dir: Target directory (created if needed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    field_records = []
    vessel_records = []
    for spec in d.specimens:
        for fld in spec.fields:
            field_records.append((spec.specimen_id, fld.field_id, fld.tissue.code, fld.pla))
            for ves in fld.vessels:
                vessel_records.append(
                    (spec.specimen_id, fld.field_id, ves.vessel_id, ves.area, ves.circularity)
                )
    fields_path = out_dir / "fields.csv"
    vessels_path = out_dir / "vessels.csv"
    for path, records, columns in (
        (fields_path, field_records, FIELD_COLUMNS),
        (vessels_path, vessel_records, VESSEL_COLUMNS),
    ):
        pd.DataFrame.from_records(records, columns=list(columns)).to_csv(
            path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8"
        )
    logger.info("wrote %s and %s", fields_path, vessels_path)
    return fields_path, vessels_path


@dataclass(frozen=True)
class SummaryRow:
    """Mean and SD of the four outcomes within one tissue group.

    SDs are NaN (undefined) for groups with a single observation.
    """

    group: str
    kind: str
    n_specimens: int
    n_fields: int
    n_vessels: int
    lvd_mean: float
    lvd_sd: float
    pla_mean: float
    pla_sd: float
    area_mean: float
    area_sd: float
    circularity_mean: float
    circularity_sd: float


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple[SummaryRow, ...]
    total_fields: int
    total_vessels: int
    logarea_lvd_correlation: float = field(default=float("nan"))

    def by_group(self, group: str, kind: str | None = None) -> SummaryRow:
        for row in self.rows:
            if row.group == group and (kind is None or row.kind == kind):
                return row
        msg = f"no summary row for group {group!r}"
        raise KeyError(msg)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.rows])


def _mean_sd(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
    return mean, sd


def summarize(d: Dataset) -> SummaryTable:
    """Mean (SD) of LVD, %LA, vessel area and circularity by tissue group.

    Rows are produced for each of the six tissue codes, each of the four coarse
    groups, and for the two control regions combined. LVD and %LA are
    summarised over fields; area and circularity over vessels pooled across
    fields.

    :param d: A nonempty dataset.
    """
    if d.n_specimens == 0:
        msg = "cannot summarise an empty dataset"
        raise ValueError(msg)
    arr = d.arrays
    codes = np.array([t.value for t in arr.field_tissue])
    coarse = np.array([t.coarse.value for t in arr.field_tissue])
    control = np.array([t.is_control for t in arr.field_tissue])
    area = np.exp(arr.log_area)
    circ = 1.0 / (1.0 + np.exp(-arr.logit_circularity))

    def make_row(group: str, kind: str, mask: np.ndarray) -> SummaryRow:
        vmask = mask[arr.vessel_field]
        lvd_mean, lvd_sd = _mean_sd(arr.lvd[mask].astype(float))
        pla_mean, pla_sd = _mean_sd(arr.pla[mask])
        area_mean, area_sd = _mean_sd(area[vmask])
        circ_mean, circ_sd = _mean_sd(circ[vmask])
        return SummaryRow(
            group=group,
            kind=kind,
            n_specimens=int(np.unique(arr.field_specimen[mask]).size),
            n_fields=int(mask.sum()),
            n_vessels=int(vmask.sum()),
            lvd_mean=lvd_mean,
            lvd_sd=lvd_sd,
            pla_mean=pla_mean,
            pla_sd=pla_sd,
            area_mean=area_mean,
            area_sd=area_sd,
            circularity_mean=circ_mean,
            circularity_sd=circ_sd,
        )

    rows = [make_row("CONTROL", "combined", control)]
    rows += [make_row(t.value, "code", codes == t.value) for t in TissueType]
    rows += [make_row(g.value, "coarse", coarse == g.value) for g in CoarseTissue]
    vessel_lvd = arr.lvd[arr.vessel_field].astype(float)
    corr = float("nan")
    if arr.n_vessels > 1 and np.std(vessel_lvd) > 0 and np.std(arr.log_area) > 0:
        corr = float(np.corrcoef(arr.log_area, vessel_lvd)[0, 1])
    return SummaryTable(tuple(rows), arr.n_fields, arr.n_vessels, corr)


def plot_rows(d: Dataset) -> pd.DataFrame:
    """Plot-ready per-vessel table (log vessel area against field LVD)."""
    arr = d.arrays
    keys = np.array(arr.field_keys, dtype=object).reshape(-1, 2)
    tissue = np.array([t.value for t in arr.field_tissue])
    return pd.DataFrame(
        {
            "specimen_id": keys[arr.vessel_field, 0],
            "field_id": keys[arr.vessel_field, 1],
            "tissue": tissue[arr.vessel_field],
            "lvd": arr.lvd[arr.vessel_field],
            "log_area": arr.log_area,
            "logit_circularity": arr.logit_circularity,
        }
    )
