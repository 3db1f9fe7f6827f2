"""Trial data with truncation by death: loading, validation and descriptives.

A unit's outcome exists only if the unit survived. Internally truncated
outcomes are held as NaN in a float array, but every accessor that exposes a
single unit returns ``None`` for them, and all outcome summaries go through
the survivor mask so a truncated unit can never leak into a mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

ROLE_NAMES = ("distance", "principal_score", "outcome_model", "balance", "post_treatment")
COLUMN_TYPES = ("continuous", "binary")


class DataError(ValueError):
    """Raised for malformed input data or column configuration."""


@dataclass(frozen=True)
class ColumnMeta:
    """Names, types and analysis roles of the columns of a trial dataset.

    ``roles`` maps a role name (``distance``, ``principal_score``,
    ``outcome_model``, ``balance``, ``post_treatment``) to a list of
    covariate columns. A role that is absent from the mapping is undeclared,
    which is different from being declared with an empty list.
    """

    columns: Mapping[str, str]
    roles: Mapping[str, Sequence[str]] = field(default_factory=dict)
    treatment: str = "A"
    survival: str = "S"
    outcome: str = "Y"
    id: Optional[str] = None

    def __post_init__(self):
        for name, kind in self.columns.items():
            if kind not in COLUMN_TYPES:
                raise DataError(f"column {name!r}: unknown type {kind!r}")
        for role, cols in self.roles.items():
            if role not in ROLE_NAMES:
                raise DataError(f"unknown role {role!r}; valid roles are {ROLE_NAMES}")
            for c in cols:
                if c not in self.columns:
                    raise DataError(f"role {role!r} uses undeclared column {c!r}")
        object.__setattr__(self, "columns", dict(self.columns))
        object.__setattr__(self, "roles", {r: list(c) for r, c in self.roles.items()})

    def role(self, name: str) -> list[str]:
        if name not in self.roles:
            raise DataError(f"role {name!r} is not declared in the column config")
        return list(self.roles[name])

    def has_role(self, name: str) -> bool:
        return name in self.roles

    def is_binary(self, column: str) -> bool:
        return self.columns[column] == "binary"

    @property
    def covariates(self) -> list[str]:
        return list(self.columns)

    def to_dict(self) -> dict:
        out = {
            "treatment": self.treatment,
            "survival": self.survival,
            "outcome": self.outcome,
            "columns": dict(self.columns),
            "roles": {r: list(c) for r, c in self.roles.items()},
        }
        if self.id is not None:
            out["id"] = self.id
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ColumnMeta":
        if "columns" not in raw:
            raise DataError("column config needs a 'columns' mapping")
        return cls(
            columns=raw["columns"],
            roles=raw.get("roles", {}),
            treatment=raw.get("treatment", "A"),
            survival=raw.get("survival", "S"),
            outcome=raw.get("outcome", "Y"),
            id=raw.get("id"),
        )


def load_roles(path: Union[str, Path]) -> ColumnMeta:
    path = Path(path)
    if not path.exists():
        raise DataError(f"column config not found: {path}")
    with open(path) as fh:
        return ColumnMeta.from_dict(json.load(fh))


@dataclass(frozen=True)
class UnitRecord:
    id: int
    x0: np.ndarray
    a: int
    s: int
    y: Optional[float]
    x1: Optional[np.ndarray] = None


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class Dataset:
    """Immutable table of study participants.

    Parameters
    ----------
    covariates : DataFrame
        One column per declared covariate, one row per unit.
    a, s : array-like of {0, 1}
        Treatment and survival indicators.
    y : array-like of float
        Outcome; must be NaN exactly where ``s == 0``.
    meta : ColumnMeta
    ids : array-like of int, optional
        Unit identifiers, default ``0..n-1``.
    """

    def __init__(self, covariates: pd.DataFrame, a, s, y, meta: ColumnMeta, ids=None):
        covariates = covariates.reset_index(drop=True)
        n = len(covariates)
        a = np.asarray(a)
        s = np.asarray(s)
        y = np.asarray(y, dtype=float)
        if not (len(a) == len(s) == len(y) == n):
            raise DataError("covariates, a, s and y must have the same length")
        ids = np.arange(n) if ids is None else np.asarray(ids)
        if len(np.unique(ids)) != n:
            raise DataError("unit ids must be unique")
        missing = [c for c in meta.columns if c not in covariates.columns]
        if missing:
            raise DataError(f"missing required column(s): {missing}")
        for name, arr in ((meta.treatment, a), (meta.survival, s)):
            bad = np.flatnonzero(~np.isin(arr, (0, 1)))
            if bad.size:
                i = bad[0]
                raise DataError(f"row {i + 1}, column {name!r}: value {arr[i]!r} is not 0/1")
        dead_with_y = np.flatnonzero((s == 0) & ~np.isnan(y))
        if dead_with_y.size:
            raise DataError(
                f"row {dead_with_y[0] + 1}, column {meta.outcome!r}: outcome present for a "
                "non-survivor (truncated outcomes must be empty)"
            )
        alive_without_y = np.flatnonzero((s == 1) & ~np.isfinite(y))
        if alive_without_y.size:
            raise DataError(
                f"row {alive_without_y[0] + 1}, column {meta.outcome!r}: outcome missing for a survivor"
            )
        cov = covariates[list(meta.columns)].copy()
        if cov.isna().any().any():
            col = cov.columns[cov.isna().any()][0]
            row = int(np.flatnonzero(cov[col].isna())[0])
            raise DataError(f"row {row + 1}, column {col!r}: missing covariate value")
        self._cov = cov
        self.meta = meta
        self.ids = _frozen(ids)
        self.a = _frozen(a.astype(int))
        self.s = _frozen(s.astype(int))
        self.y = _frozen(y)

    def __len__(self) -> int:
        return len(self.a)

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, treated={int(self.a.sum())}, survivors={int(self.s.sum())})"

    @property
    def n(self) -> int:
        return len(self)

    @property
    def covariates(self) -> pd.DataFrame:
        return self._cov.copy()

    def x(self, columns: Union[str, Sequence[str]]) -> np.ndarray:
        """Covariate matrix for a role name or an explicit column list."""
        if isinstance(columns, str):
            columns = self.meta.role(columns)
        return self._cov[list(columns)].to_numpy(dtype=float)

    def group(self, a: int, s: int) -> np.ndarray:
        """Row indices of the ``{A=a, S=s}`` cell."""
        return np.flatnonzero((self.a == a) & (self.s == s))

    def index_of(self, unit_id) -> int:
        pos = np.flatnonzero(self.ids == unit_id)
        if pos.size == 0:
            raise KeyError(unit_id)
        return int(pos[0])

    def unit(self, i: int) -> UnitRecord:
        x0_cols = [c for c in self.meta.columns if c not in self.meta.roles.get("post_treatment", [])]
        x1_cols = self.meta.roles.get("post_treatment")
        y = None if self.s[i] == 0 else float(self.y[i])
        return UnitRecord(
            id=int(self.ids[i]),
            x0=self._cov.loc[i, x0_cols].to_numpy(dtype=float),
            a=int(self.a[i]),
            s=int(self.s[i]),
            y=y,
            x1=None if x1_cols is None else self._cov.loc[i, x1_cols].to_numpy(dtype=float),
        )

    @property
    def units(self) -> list[UnitRecord]:
        return [self.unit(i) for i in range(len(self))]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Dataset(self._cov.iloc[rows], self.a[rows], self.s[rows], self.y[rows], self.meta, self.ids[rows])

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self._cov, self.a, self.s, y, self.meta, self.ids)

    def to_frame(self) -> pd.DataFrame:
        frame = self._cov.copy()
        if self.meta.id is not None:
            frame.insert(0, self.meta.id, self.ids)
        frame[self.meta.treatment] = self.a
        frame[self.meta.survival] = self.s
        frame[self.meta.outcome] = self.y
        return frame

    def require_survivors_in_both_arms(self):
        for arm in (0, 1):
            if self.group(arm, 1).size == 0:
                raise DataError(f"no survivors with A={arm}; matching-based estimation is undefined")


def load_dataset(path: Union[str, Path], schema: Union[ColumnMeta, Mapping, str, Path]) -> Dataset:
    """Read a delimited file with a header row into a validated :class:`Dataset`.

    ``schema`` is a :class:`ColumnMeta`, its dict form, or a path to the JSON
    column config. Empty/NA outcome cells mark truncated outcomes.
    """
    if isinstance(schema, (str, Path)):
        meta = load_roles(schema)
    elif isinstance(schema, ColumnMeta):
        meta = schema
    else:
        meta = ColumnMeta.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, sep="\t" if path.suffix in (".tsv", ".tab") else ",")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no rows") from None
    if len(frame) == 0:
        raise DataError(f"{path}: no rows")
    required = list(meta.columns) + [meta.treatment, meta.survival, meta.outcome]
    if meta.id is not None:
        required.append(meta.id)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")
    for col in (meta.treatment, meta.survival):
        vals = pd.to_numeric(frame[col], errors="coerce")
        bad = np.flatnonzero(~vals.isin([0, 1]).to_numpy())
        if bad.size:
            i = bad[0]
            raise DataError(f"{path}: row {i + 1}, column {col!r}: value {frame[col].iloc[i]!r} is not 0/1")
    ids = frame[meta.id].to_numpy() if meta.id is not None else None
    return Dataset(
        frame[list(meta.columns)],
        frame[meta.treatment].to_numpy(dtype=int),
        frame[meta.survival].to_numpy(dtype=int),
        pd.to_numeric(frame[meta.outcome], errors="coerce").to_numpy(dtype=float),
        meta,
        ids,
    )


def save_dataset(d: Dataset, path: Union[str, Path]) -> None:
    d.to_frame().to_csv(path, index=False)


def load_nsw() -> Dataset:
    """The NSW employment-training trial (722 participants), bundled with the package."""
    pkg = resources.files("sacematch") / "datasets"
    with resources.as_file(pkg / "nsw.csv") as csv, resources.as_file(pkg / "nsw_roles.json") as roles:
        return load_dataset(csv, roles)


def nsw_paths() -> tuple[Path, Path]:
    pkg = resources.files("sacematch") / "datasets"
    return Path(str(pkg / "nsw.csv")), Path(str(pkg / "nsw_roles.json"))


@dataclass(frozen=True)
class CrossTab:
    """Treatment-by-survival counts; ``counts[a, s]``."""

    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / self.n

    @property
    def row_proportions(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    @property
    def column_proportions(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=0, keepdims=True)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, index=["A=0", "A=1"], columns=["S=0", "S=1"])
        frame["Total"] = frame.sum(axis=1)
        frame.loc["Total"] = frame.sum(axis=0)
        return frame


def crosstab_survival(d: Dataset) -> CrossTab:
    counts = np.zeros((2, 2), dtype=int)
    np.add.at(counts, (d.a, d.s), 1)
    return CrossTab(counts)


def survival_rates(d: Dataset) -> tuple[float, float]:
    """``(p0, p1)`` with ``p_a = Pr(S=1 | A=a)``."""
    ct = crosstab_survival(d).counts
    arm_sizes = ct.sum(axis=1)
    if (arm_sizes == 0).any():
        raise DataError("both treatment arms must be non-empty")
    return float(ct[0, 1] / arm_sizes[0]), float(ct[1, 1] / arm_sizes[1])
