"""Data model shared by every correction method.

A :class:`Dataset` is an immutable collection of named float columns with an
explicit per-cell missingness mask plus a binary substudy indicator ``r``.
Study designs declare which error-prone/true measure columns exist and when
they are observed; outcome specs bind the substantive model to columns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import ConfigError

VALIDATION = "validation"
REPLICATION = "replication"
CALIBRATION = "calibration"

LINEAR = "linear"
LOGISTIC = "logistic"
WEIBULL = "weibull"

COLUMN_KINDS = ("float", "binary", "time")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Column:
    """One named vector: float values plus a boolean missingness mask.

    ``values`` holds NaN at masked cells as a safeguard, but ``missing`` is
    authoritative: a measured value of 0.0 and a missing cell are distinct.
    """

    values: np.ndarray
    missing: np.ndarray
    kind: str = "float"

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ConfigError(f"unknown column kind {self.kind!r}")
        values = np.asarray(self.values, dtype=float).copy()
        missing = np.asarray(self.missing, dtype=bool).copy()
        if values.shape != missing.shape or values.ndim != 1:
            raise ConfigError("column values and mask must be 1-d arrays of equal length")
        values[missing] = np.nan
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "missing", _frozen(missing))

    @classmethod
    def of(cls, values, kind: str = "float") -> "Column":
        """Build a column from an array, treating NaN as missing."""
        values = np.asarray(values, dtype=float)
        return cls(values=values, missing=np.isnan(values), kind=kind)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def observed_values(self) -> np.ndarray:
        return self.values[~self.missing]


@dataclass(frozen=True)
class Dataset:
    """Immutable rectangular dataset with substudy indicator ``r``.

    All columns share length ``n``; ``r`` is binary with no missing cells.
    """

    columns: Mapping[str, Column]
    r: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r)
        if r.ndim != 1:
            raise ConfigError("r indicator must be a 1-d vector")
        if np.isnan(np.asarray(r, dtype=float)).any():
            raise ConfigError("r indicator must have no missing cells")
        r = np.asarray(r, dtype=int)
        if not np.isin(r, (0, 1)).all():
            raise ConfigError("r indicator must be binary 0/1")
        cols = dict(self.columns)
        for name, col in cols.items():
            if not isinstance(col, Column):
                col = Column.of(col)
                cols[name] = col
            if len(col.values) != len(r):
                raise ConfigError(f"column {name!r} has length {len(col.values)}, expected {len(r)}")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "r", _frozen(r))

    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.columns)

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise ConfigError(f"dataset has no column {name!r}") from None

    def vals(self, name: str) -> np.ndarray:
        return self.column(name).values

    def miss(self, name: str) -> np.ndarray:
        return self.column(name).missing

    def with_columns(self, **replacements) -> "Dataset":
        """Return a new dataset with columns replaced or added."""
        cols = dict(self.columns)
        for name, col in replacements.items():
            if not isinstance(col, Column):
                kind = cols[name].kind if name in cols else "float"
                col = Column.of(col, kind=kind)
            cols[name] = col
        return Dataset(columns=cols, r=self.r)

    def take(self, idx) -> "Dataset":
        """Row subset/resample (used by bootstrap and complete-case filters)."""
        idx = np.asarray(idx)
        cols = {
            name: Column(values=c.values[idx], missing=c.missing[idx], kind=c.kind)
            for name, c in self.columns.items()
        }
        return Dataset(columns=cols, r=self.r[idx])


@dataclass(frozen=True)
class StudyDesign:
    """Which measure columns exist and when they are observed.

    Roles bind measure names to dataset columns:

    - validation:   ``x`` (observed iff r=1), ``xstar`` (always)
    - replication:  ``xstar1`` (always), ``xstar2`` (observed iff r=1)
    - calibration:  ``xstar`` (always) plus ``xstarstar`` or
      (``xstarstar1``, ``xstarstar2``) observed iff r=1
    """

    kind: str
    columns: Mapping[str, str]

    _ALWAYS = {VALIDATION: ("xstar",), REPLICATION: ("xstar1",), CALIBRATION: ("xstar",)}

    def __post_init__(self):
        cols = dict(self.columns)
        object.__setattr__(self, "columns", cols)
        roles = set(cols)
        if self.kind == VALIDATION:
            required = {"x", "xstar"}
        elif self.kind == REPLICATION:
            required = {"xstar1", "xstar2"}
        elif self.kind == CALIBRATION:
            if "xstarstar" in roles:
                required = {"xstar", "xstarstar"}
            else:
                required = {"xstar", "xstarstar1", "xstarstar2"}
        else:
            raise ConfigError(f"unknown study design {self.kind!r}")
        if roles != required:
            raise ConfigError(f"{self.kind} design requires roles {sorted(required)}, got {sorted(roles)}")

    def role(self, name: str) -> str:
        return self.columns[name]

    def always_observed_measures(self) -> tuple[str, ...]:
        """Roles of measures every row must carry."""
        return self._ALWAYS[self.kind]

    def substudy_measures(self) -> tuple[str, ...]:
        """Roles of measures observed exactly on r=1 rows."""
        if self.kind == VALIDATION:
            return ("x",)
        if self.kind == REPLICATION:
            return ("xstar2",)
        if "xstarstar" in self.columns:
            return ("xstarstar",)
        return ("xstarstar1", "xstarstar2")


@dataclass(frozen=True)
class OutcomeSpec:
    """Substantive-model outcome: linear, logistic, or Weibull survival."""

    kind: str
    y: str | None = None
    time: str | None = None
    event: str | None = None
    covariates: tuple[str, ...] = ()
    exposure: str = "x"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.kind in (LINEAR, LOGISTIC):
            if not self.y:
                raise ConfigError(f"{self.kind} outcome requires a y column")
        elif self.kind == WEIBULL:
            if not (self.time and self.event):
                raise ConfigError("weibull outcome requires time and event columns")
        else:
            raise ConfigError(f"unknown outcome kind {self.kind!r}")

    def outcome_columns(self) -> tuple[str, ...]:
        if self.kind == WEIBULL:
            return (self.time, self.event)
        return (self.y,)


@dataclass(frozen=True)
class ErrorModelSpec:
    """Measurement error model: classical, or linear systematic distortion.

    Classical error is the systematic model with theta0=0, theta1=1.
    """

    kind: str = "classical"
    sigma2_u: float = 0.0
    theta0: float = 0.0
    theta1: float = 1.0
    nondifferential: bool = True

    def __post_init__(self):
        if self.kind not in ("classical", "systematic"):
            raise ConfigError(f"unknown error model {self.kind!r}")
        if self.sigma2_u < 0:
            raise ConfigError("sigma2_u must be >= 0")
        if self.kind == "classical" and (self.theta0 != 0.0 or self.theta1 != 1.0):
            raise ConfigError("classical error model fixes theta0=0, theta1=1")


@dataclass(frozen=True)
class SelectionMechanism:
    """How rows are selected into the substudy (r=1).

    mcar draws r ~ Bernoulli(p). mar/mnar use a logistic model on the named
    terms; mar may use y/z/xstar, mnar may additionally use the true x.
    Correction methods assume mcar/mar; mnar exists for sensitivity demos.
    """

    kind: str = "mcar"
    p: float = 1.0
    coefficients: Mapping[str, float] = field(default_factory=dict)

    _MAR_TERMS = {"intercept", "y", "logt", "d", "xstar"}

    def __post_init__(self):
        object.__setattr__(self, "coefficients", dict(self.coefficients))
        if self.kind == "mcar":
            if not 0.0 <= self.p <= 1.0:
                raise ConfigError("mcar selection probability must lie in [0, 1]")
        elif self.kind in ("mar", "mnar"):
            allowed = set(self._MAR_TERMS)
            if self.kind == "mnar":
                allowed.add("x")
            unknown = set(k for k in self.coefficients if not (k in allowed or k.startswith("z")))
            if unknown:
                raise ConfigError(f"unknown selection terms {sorted(unknown)}")
        else:
            raise ConfigError(f"unknown selection mechanism {self.kind!r}")


@dataclass(frozen=True)
class RngStream:
    """Reproducible, splittable random stream.

    Identical (seed, path) yields bit-identical draws; distinct paths yield
    statistically independent streams (counter-based Philox keyed through a
    SeedSequence spawn path), so bootstrap replicates and MCMC chains can run
    in parallel without sharing state.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def split(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(stream_id),))


@dataclass(frozen=True)
class Violation:
    """A single dataset contract violation; data, not an exception."""

    rule: str
    message: str
    row: int | None = None
    column: str | None = None

    def __str__(self):
        where = []
        if self.column is not None:
            where.append(f"column {self.column!r}")
        if self.row is not None:
            where.append(f"row {self.row}")
        loc = f" ({', '.join(where)})" if where else ""
        return f"[{self.rule}]{loc} {self.message}"


def _presence_violations(ds: Dataset, col: str, expect_r1: bool, expect_r0: bool, rule: str) -> list[Violation]:
    """Observed-iff checks for one column: expect_* give required presence per r group."""
    out = []
    missing = ds.miss(col)
    for row in np.flatnonzero((ds.r == 1) & missing) if expect_r1 else ():
        out.append(Violation(rule=rule, row=int(row), column=col, message="required measure missing on r=1 row"))
    if not expect_r1:
        for row in np.flatnonzero((ds.r == 1) & ~missing):
            out.append(Violation(rule=rule, row=int(row), column=col, message="measure present on r=1 row but design declares it absent"))
    for row in np.flatnonzero((ds.r == 0) & missing) if expect_r0 else ():
        out.append(Violation(rule=rule, row=int(row), column=col, message="required measure missing on r=0 row"))
    if not expect_r0:
        for row in np.flatnonzero((ds.r == 0) & ~missing):
            out.append(Violation(rule=rule, row=int(row), column=col, message="measure present on r=0 row but design declares it absent"))
    return out


def validate_dataset(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec) -> list[Violation]:
    """Check a dataset against its declared design and outcome contract.

    Returns an empty list iff the dataset conforms. Measure columns must be
    present/missing exactly as the design declares per r group; outcome
    columns must be fully observed (positive times, binary events). Missing
    covariate cells are allowed — the Bayesian and MI methods model them —
    so they are not violations.
    """
    out: list[Violation] = []
    needed = list(design.columns.values()) + list(outcome.outcome_columns()) + list(outcome.covariates)
    for col in needed:
        if col not in ds.columns:
            out.append(Violation(rule="column-exists", column=col, message="declared column not in dataset"))
    if out:
        return out

    for role in design.always_observed_measures():
        col = design.role(role)
        out.extend(_presence_violations(ds, col, expect_r1=True, expect_r0=True, rule="measure-presence"))
    for role in design.substudy_measures():
        col = design.role(role)
        out.extend(_presence_violations(ds, col, expect_r1=True, expect_r0=False, rule="measure-presence"))

    for col in outcome.outcome_columns():
        for row in np.flatnonzero(ds.miss(col)):
            out.append(Violation(rule="outcome-observed", row=int(row), column=col, message="outcome must be observed on every row"))
    if outcome.kind == WEIBULL:
        t = ds.vals(outcome.time)
        for row in np.flatnonzero(~ds.miss(outcome.time) & ~(t > 0)):
            out.append(Violation(rule="time-positive", row=int(row), column=outcome.time, message="survival time must be strictly positive"))
        d = ds.vals(outcome.event)
        for row in np.flatnonzero(~ds.miss(outcome.event) & ~np.isin(d, (0.0, 1.0))):
            out.append(Violation(rule="event-binary", row=int(row), column=outcome.event, message="event indicator must be 0/1"))
    if outcome.kind == LOGISTIC:
        y = ds.vals(outcome.y)
        for row in np.flatnonzero(~ds.miss(outcome.y) & ~np.isin(y, (0.0, 1.0))):
            out.append(Violation(rule="outcome-binary", row=int(row), column=outcome.y, message="binary outcome must be 0/1"))

    for name, colobj in ds.columns.items():
        if colobj.kind == "binary":
            bad = ~colobj.missing & ~np.isin(colobj.values, (0.0, 1.0))
            for row in np.flatnonzero(bad):
                out.append(Violation(rule="binary-cells", row=int(row), column=name, message="binary column cell not 0/1"))
    return out


# ---------------------------------------------------------------------------
# CSV and config I/O
#
# CSV contract: header row of column names, empty field = missing, binary
# columns as 0/1, the substudy indicator in a column named "r". Floats are
# written with repr() so a round trip restores every cell bit-exactly.

def write_csv(ds: Dataset, path) -> None:
    names = list(ds.names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r"] + names)
        for i in range(ds.n):
            row = [str(int(ds.r[i]))]
            for name in names:
                col = ds.columns[name]
                if col.missing[i]:
                    row.append("")
                elif col.kind in ("binary",):
                    row.append(str(int(col.values[i])))
                else:
                    row.append(repr(float(col.values[i])))
            w.writerow(row)


def read_csv(path, kinds: Mapping[str, str] | None = None) -> Dataset:
    kinds = dict(kinds or {})
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    header = rows[0]
    if "r" not in header:
        raise ConfigError(f"{path}: CSV must contain an 'r' indicator column")
    body = rows[1:]
    data = {name: [] for name in header}
    for irow, row in enumerate(body):
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {irow} has {len(row)} fields, expected {len(header)}")
        for name, cell in zip(header, row):
            data[name].append(cell)

    def parse(cells):
        values = np.empty(len(cells))
        missing = np.zeros(len(cells), dtype=bool)
        for i, cell in enumerate(cells):
            if cell == "":
                values[i] = np.nan
                missing[i] = True
            else:
                values[i] = float(cell)
        return values, missing

    r_vals, r_miss = parse(data["r"])
    if r_miss.any():
        raise ConfigError(f"{path}: 'r' column may not have missing cells")
    columns = {}
    for name in header:
        if name == "r":
            continue
        values, missing = parse(data[name])
        columns[name] = Column(values=values, missing=missing, kind=kinds.get(name, "float"))
    return Dataset(columns=columns, r=r_vals.astype(int))


def design_from_config(cfg: Mapping) -> StudyDesign:
    try:
        return StudyDesign(kind=cfg["type"], columns=dict(cfg["columns"]))
    except KeyError as e:
        raise ConfigError(f"design config missing key {e}") from None


def outcome_from_config(cfg: Mapping) -> OutcomeSpec:
    kind = cfg.get("type")
    if kind is None:
        raise ConfigError("outcome config missing 'type'")
    return OutcomeSpec(
        kind=kind,
        y=cfg.get("y"),
        time=cfg.get("time"),
        event=cfg.get("event"),
        covariates=tuple(cfg.get("covariates", ())),
        exposure=cfg.get("exposure", "x"),
    )


def error_model_from_config(cfg: Mapping) -> ErrorModelSpec:
    return ErrorModelSpec(
        kind=cfg.get("type", "classical"),
        sigma2_u=float(cfg.get("sigma2_u", 0.0)),
        theta0=float(cfg.get("theta0", 0.0)),
        theta1=float(cfg.get("theta1", 1.0)),
        nondifferential=bool(cfg.get("nondifferential", True)),
    )


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
