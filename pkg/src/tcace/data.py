"""Merged study-sample + target-population data.

A :class:`Dataset` holds one row per unit.  Study rows (``s == 1``) carry the
assignment ``z``, treatment received ``d`` and outcome ``y``; target rows
(``s == 0``) carry covariates only, plus optionally the assignment ``z``,
treatment received ``d_target`` and a proxy compliance flag ``c_proxy``.
Missing values are stored as NaN internally and as empty cells on disk.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyArm,
    EmptyInput,
    InputError,
    MissingColumn,
    NonBinaryIndicator,
    NonFiniteValue,
    UnexpectedOutcomeOnTarget,
)

TINY_ARM = 10


@dataclass(frozen=True)
class UnitRecord:
    x: tuple[float, ...]
    s: int
    z: int | None = None
    d: int | None = None
    y: float | None = None
    c_proxy: int | None = None
    d_target: int | None = None


def augment_intercept(matrix) -> np.ndarray:
    """Prepend a column of ones unless the leading column already is one."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if m.size == 0 or m.shape[0] == 0:
        raise EmptyInput("EmptyInput: cannot augment an empty matrix")
    if m.shape[1] > 0 and np.all(m[:, 0] == 1.0):
        return m.copy()
    return np.column_stack([np.ones(m.shape[0]), m])


def _optional_binary(values, name: str, mask: np.ndarray | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    check = ~np.isnan(arr)
    if mask is not None:
        check &= mask
    bad = np.flatnonzero(check & (arr != 0.0) & (arr != 1.0))
    if bad.size:
        i = int(bad[0])
        raise NonBinaryIndicator(i + 1, name, arr[i])
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable merged dataset.

    ``x`` always includes the intercept as its first column.  ``x_adjust``
    optionally holds extra study-only covariates used by the WLS estimator
    (NaN is allowed on target rows).
    """

    x: np.ndarray
    s: np.ndarray
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    d_target: np.ndarray | None = None
    c_proxy: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    x_adjust: np.ndarray | None = None
    adjust_names: tuple[str, ...] = ()
    intercept_added: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_arrays(
        cls,
        x,
        s,
        z,
        d,
        y,
        *,
        d_target=None,
        c_proxy=None,
        covariate_names: Sequence[str] | None = None,
        x_adjust=None,
        adjust_names: Sequence[str] | None = None,
        add_intercept: bool = True,
    ) -> "Dataset":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0:
            raise EmptyInput("EmptyInput: dataset has no rows")
        intercept_added = False
        if add_intercept:
            aug = augment_intercept(x)
            intercept_added = aug.shape[1] != x.shape[1]
            x = aug
        rows = x.shape[0]
        s = np.asarray(s, dtype=float)
        z = np.asarray(z, dtype=float)
        d = np.asarray(d, dtype=float)
        y = np.asarray(y, dtype=float)
        for name, arr in (("s", s), ("z", z), ("d", d), ("y", y)):
            if arr.shape != (rows,):
                raise InputError(f"column {name!r} has length {arr.shape} but x has {rows} rows")
        if covariate_names is not None:
            names = tuple(covariate_names)
        else:
            k = x.shape[1] - 1 if np.all(x[:, 0] == 1.0) else x.shape[1]
            names = tuple(f"x{j}" for j in range(1, k + 1))
        if len(names) > x.shape[1]:
            raise InputError("more covariate names than covariate columns")

        bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
        if bad.size:
            i = int(bad[0])
            j = int(np.flatnonzero(~np.isfinite(x[i]))[0])
            offset = x.shape[1] - len(names)
            col = names[j - offset] if j >= offset else "intercept"
            raise NonFiniteValue(i + 1, col, x[i, j])

        if np.isnan(s).any():
            raise MissingColumn("s", int(np.flatnonzero(np.isnan(s))[0]) + 1, "sample indicator is required")
        _optional_binary(s, "s")
        s = s.astype(np.int8)
        study = s == 1
        _optional_binary(z, "z")
        _optional_binary(d, "d")
        for name, arr in (("z", z), ("d", d), ("y", y)):
            miss = np.flatnonzero(study & np.isnan(arr))
            if miss.size:
                raise MissingColumn(name, int(miss[0]) + 1, "required on study rows")
        inf_y = np.flatnonzero(np.isinf(y))
        if inf_y.size:
            raise NonFiniteValue(int(inf_y[0]) + 1, "y", y[inf_y[0]])
        outcome_on_target = np.flatnonzero(~study & ~np.isnan(y))
        if outcome_on_target.size:
            raise UnexpectedOutcomeOnTarget(int(outcome_on_target[0]) + 1)
        # target-side treatment received lives in d_target, never in d
        d = np.where(study, d, np.nan)
        if d_target is not None:
            d_target = _optional_binary(d_target, "d_target")
            d_target = np.where(study, np.nan, d_target)
            if np.isnan(d_target).all():
                d_target = None
        if c_proxy is not None:
            c_proxy = _optional_binary(c_proxy, "c_proxy")
            c_proxy = np.where(study, np.nan, c_proxy)
            if np.isnan(c_proxy).all():
                c_proxy = None
        n = int(study.sum())
        if n < 2 or not np.any(z[study] == 1) or not np.any(z[study] == 0):
            raise EmptyArm()
        if n == rows:
            raise InputError("dataset needs at least one target row (s=0)")
        if x_adjust is not None:
            x_adjust = np.asarray(x_adjust, dtype=float)
            if x_adjust.ndim == 1:
                x_adjust = x_adjust[:, None]
            if x_adjust.shape[0] != rows:
                raise InputError("x_adjust must have one row per unit")
            an = tuple(adjust_names) if adjust_names is not None else tuple(
                f"a{j}" for j in range(1, x_adjust.shape[1] + 1)
            )
            bad = np.flatnonzero(study & ~np.isfinite(x_adjust).all(axis=1))
            if bad.size:
                i = int(bad[0])
                j = int(np.flatnonzero(~np.isfinite(x_adjust[i]))[0])
                raise NonFiniteValue(i + 1, an[j], x_adjust[i, j])
            adjust_names = an
        else:
            adjust_names = ()
        for arr in (x, s, z, d, y, d_target, c_proxy, x_adjust):
            if arr is not None:
                arr.setflags(write=False)
        return cls(
            x=x,
            s=s,
            z=z,
            d=d,
            y=y,
            d_target=d_target,
            c_proxy=c_proxy,
            covariate_names=tuple(names),
            x_adjust=x_adjust,
            adjust_names=tuple(adjust_names),
            intercept_added=intercept_added,
        )

    @property
    def study(self) -> np.ndarray:
        return self.s == 1

    @property
    def target(self) -> np.ndarray:
        return self.s == 0

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.s == 1))

    @property
    def big_n(self) -> int:
        return int(np.count_nonzero(self.s == 0))

    @property
    def total(self) -> int:
        return int(self.s.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def records(self) -> list[UnitRecord]:
        def opt_int(a, i):
            return None if a is None or math.isnan(a[i]) else int(a[i])

        def opt_float(a, i):
            return None if math.isnan(a[i]) else float(a[i])

        return [
            UnitRecord(
                x=tuple(float(v) for v in self.x[i]),
                s=int(self.s[i]),
                z=opt_int(self.z, i),
                d=opt_int(self.d, i),
                y=opt_float(self.y, i),
                c_proxy=opt_int(self.c_proxy, i),
                d_target=opt_int(self.d_target, i),
            )
            for i in range(self.total)
        ]

    def take(self, index: np.ndarray) -> "Dataset":
        """Row subset / resample (indices may repeat)."""
        index = np.asarray(index)

        def sub(a):
            return None if a is None else a[index]

        return Dataset.from_arrays(
            self.x[index],
            self.s[index],
            self.z[index],
            self.d[index],
            self.y[index],
            d_target=sub(self.d_target),
            c_proxy=sub(self.c_proxy),
            covariate_names=self.covariate_names,
            x_adjust=sub(self.x_adjust),
            adjust_names=self.adjust_names or None,
            add_intercept=False,
        )._with_intercept_flag(self.intercept_added)

    def _with_intercept_flag(self, flag: bool) -> "Dataset":
        object.__setattr__(self, "intercept_added", flag)
        return self

    def select_covariates(self, names: Iterable[str]) -> "Dataset":
        """Dataset whose selection covariates are the named subset (intercept kept)."""
        names = list(names)
        missing = [c for c in names if c not in self.covariate_names]
        if missing:
            raise MissingColumn(missing[0])
        offset = self.p - len(self.covariate_names)
        cols = list(range(offset)) + [offset + self.covariate_names.index(c) for c in names]
        ds = Dataset.from_arrays(
            self.x[:, cols],
            self.s,
            self.z,
            self.d,
            self.y,
            d_target=self.d_target,
            c_proxy=self.c_proxy,
            covariate_names=names,
            x_adjust=self.x_adjust,
            adjust_names=self.adjust_names or None,
            add_intercept=False,
        )
        return ds._with_intercept_flag(self.intercept_added)

    def drop_covariate(self, index: int) -> "Dataset":
        """Drop column ``index`` of ``x`` (0 is the intercept and cannot be dropped)."""
        offset = self.p - len(self.covariate_names)
        if not offset <= index < self.p:
            raise InputError(f"covariate index {index} out of range (intercept is not droppable)")
        keep = [c for k, c in enumerate(self.covariate_names) if k != index - offset]
        return self.select_covariates(keep)

    def adjustment_matrix(self) -> np.ndarray:
        """Covariates for WLS adjustment: ``x`` plus any study-only columns."""
        if self.x_adjust is None:
            return self.x
        return np.column_stack([self.x, self.x_adjust])


DEFAULT_SCHEMA = {"s": "s", "z": "z", "d": "d", "y": "y", "d_target": "d_target", "c_proxy": "c_proxy"}


def _parse_cell(raw: str, row: int, column: str) -> float:
    raw = raw.strip()
    if raw == "":
        return math.nan
    try:
        value = float(raw)
    except ValueError:
        raise NonFiniteValue(row, column, raw) from None
    if not math.isfinite(value):
        raise NonFiniteValue(row, column, raw)
    return value


def load_dataset(path, schema: Mapping[str, object] | None = None) -> Dataset:
    """Read a merged CSV file into a validated :class:`Dataset`.

    ``schema`` maps the logical fields ``s, z, d, y, d_target, c_proxy`` to
    column names, and ``covariates`` / ``adjust`` to lists of covariate column
    names.  Without ``covariates`` every header starting with ``x`` is used in
    file order.  A ``d`` value on a target row is read as ``d_target`` unless a
    dedicated ``d_target`` column exists.  Row numbers in errors count data
    rows from 1.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"EmptyInput: {path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise EmptyInput(f"EmptyInput: {path} has a header but no data rows")
    col = {name: k for k, name in enumerate(header)}
    for key in ("s", "z", "d", "y"):
        if schema[key] not in col:
            raise MissingColumn(str(schema[key]))
    covs = schema.get("covariates")
    if covs is None:
        reserved = {schema[k] for k in DEFAULT_SCHEMA}
        adjust = set(schema.get("adjust") or ())
        covs = [h for h in header if h.startswith("x") and h not in reserved and h not in adjust]
    covs = list(covs)
    if not covs:
        raise MissingColumn("x*", detail="no covariate columns found")
    adjust = list(schema.get("adjust") or ())
    for c in covs + adjust:
        if c not in col:
            raise MissingColumn(c)

    def column(name: str) -> np.ndarray:
        k = col[name]
        out = np.empty(len(rows))
        for i, r in enumerate(rows, start=1):
            out[i - 1] = _parse_cell(r[k] if k < len(r) else "", i, name)
        return out

    s = column(schema["s"])
    for i, v in enumerate(s, start=1):
        if math.isnan(v):
            raise MissingColumn(str(schema["s"]), i, "sample indicator is required")
        if v not in (0.0, 1.0):
            raise NonBinaryIndicator(i, str(schema["s"]), v)
    x = np.column_stack([column(c) for c in covs])
    for i in range(x.shape[0]):
        for j, c in enumerate(covs):
            if math.isnan(x[i, j]):
                raise MissingColumn(c, i + 1, "covariates may not be empty")
    y = column(schema["y"])
    for i in np.flatnonzero((s == 0) & ~np.isnan(y)):
        raise UnexpectedOutcomeOnTarget(int(i) + 1, str(schema["y"]))
    d = column(schema["d"])
    d_target = column(schema["d_target"]) if schema["d_target"] in col else None
    if d_target is None and np.any((s == 0) & ~np.isnan(d)):
        d_target = np.where(s == 0, d, np.nan)
    c_proxy = column(schema["c_proxy"]) if schema["c_proxy"] in col else None
    x_adjust = np.column_stack([column(c) for c in adjust]) if adjust else None
    return Dataset.from_arrays(
        x,
        s,
        column(schema["z"]),
        d,
        y,
        d_target=d_target,
        c_proxy=c_proxy,
        covariate_names=covs,
        x_adjust=x_adjust,
        adjust_names=adjust or None,
    )


def _fmt(v: float, integer: bool = False) -> str:
    if math.isnan(v):
        return ""
    if integer:
        return str(int(v))
    return repr(float(v))


def write_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` as CSV; floats use shortest round-trip repr."""
    offset = dataset.p - len(dataset.covariate_names)
    header = ["s", "z", "d", "y", *dataset.covariate_names, *dataset.adjust_names]
    has_dt = dataset.d_target is not None
    has_cp = dataset.c_proxy is not None
    if has_dt:
        header.append("d_target")
    if has_cp:
        header.append("c_proxy")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.total):
            row = [
                _fmt(dataset.s[i], True),
                _fmt(dataset.z[i], True),
                _fmt(dataset.d[i], True),
                _fmt(dataset.y[i]),
                *(_fmt(v) for v in dataset.x[i, offset:]),
            ]
            if dataset.x_adjust is not None:
                row.extend(_fmt(v) for v in dataset.x_adjust[i])
            if has_dt:
                row.append(_fmt(dataset.d_target[i], True))
            if has_cp:
                row.append(_fmt(dataset.c_proxy[i], True))
            w.writerow(row)


@dataclass
class ValidationReport:
    n: int
    big_n: int
    p: int
    treated: int
    control: int
    covariate_ranges: dict[str, dict[str, float]]
    target_compliance_fraction: float
    target_proxy_fraction: float
    flags: list[str]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "big_n": self.big_n,
            "p": self.p,
            "arms": {"treated": self.treated, "control": self.control},
            "covariate_ranges": self.covariate_ranges,
            "target_compliance_fraction": self.target_compliance_fraction,
            "target_proxy_fraction": self.target_proxy_fraction,
            "flags": self.flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def validate(dataset: Dataset, tiny_arm: int = TINY_ARM) -> ValidationReport:
    """Summarise arm sizes, covariate ranges and auxiliary-compliance coverage."""
    study = dataset.study
    target = dataset.target
    treated = int(np.count_nonzero(study & (dataset.z == 1)))
    control = int(np.count_nonzero(study & (dataset.z == 0)))
    offset = dataset.p - len(dataset.covariate_names)
    ranges = {}
    for j, name in enumerate(dataset.covariate_names):
        col = dataset.x[:, offset + j]
        ranges[name] = {
            "study_min": float(col[study].min()),
            "study_max": float(col[study].max()),
            "target_min": float(col[target].min()),
            "target_max": float(col[target].max()),
        }
    flags = []
    if treated < tiny_arm or control < tiny_arm:
        flags.append("TinyArm")
    big_n = dataset.big_n
    dt_frac = 0.0
    if dataset.d_target is not None:
        dt_frac = float(np.count_nonzero(~np.isnan(dataset.d_target[target]))) / big_n
    cp_frac = 0.0
    if dataset.c_proxy is not None:
        cp_frac = float(np.count_nonzero(~np.isnan(dataset.c_proxy[target]))) / big_n
    if dt_frac == 1.0:
        flags.append("PartialComplianceAvailable=full")
    elif dt_frac > 0.0:
        flags.append("PartialComplianceAvailable=partial")
    if cp_frac > 0.0:
        flags.append("ProxyComplianceAvailable")
    for name, r in ranges.items():
        if r["target_min"] < r["study_min"] or r["target_max"] > r["study_max"]:
            flags.append(f"TargetOutsideStudyRange:{name}")
    return ValidationReport(
        n=dataset.n,
        big_n=big_n,
        p=dataset.p,
        treated=treated,
        control=control,
        covariate_ranges=ranges,
        target_compliance_fraction=dt_frac,
        target_proxy_fraction=cp_frac,
        flags=flags,
    )
