"""Mixed-type longitudinal dataset schemas and tensor encoding.

A dataset is a table of per-patient time series over numeric, binary and
categorical variables.  The schema declares each variable; :func:`encode`
turns a table into a zero-padded ``(B, 1, L, N)`` tensor with numerics
min-max scaled to [0, 1] and non-numerics expanded to one-hot groups, and
:func:`decode` inverts it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
import numpy as np
import pandas as pd

ID_COLUMN = "patient_id"
TIME_COLUMN = "time_index"

NUMERIC = "numeric"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (NUMERIC, BINARY, CATEGORICAL)


class SchemaError(ValueError):
    """A table or value violates its declared schema."""


class TableFormatError(ValueError):
    """A CSV file or in-memory table is structurally malformed."""


@dataclass(frozen=True)
class VariableSpec:
    """One declared variable: its kind plus levels (non-numeric) or range (numeric)."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == NUMERIC:
            if self.levels:
                raise SchemaError(f"numeric variable {self.name!r} must not declare levels")
            if self.range is not None:
                lo, hi = float(self.range[0]), float(self.range[1])
                if not (lo < hi):
                    raise SchemaError(
                        f"numeric variable {self.name!r} has degenerate range [{lo}, {hi}]"
                    )
                object.__setattr__(self, "range", (lo, hi))
        else:
            if self.range is not None:
                raise SchemaError(f"{self.kind} variable {self.name!r} must not declare a range")
            if self.kind == BINARY and len(self.levels) != 2:
                raise SchemaError(f"binary variable {self.name!r} needs exactly 2 levels")
            if self.kind == CATEGORICAL and len(self.levels) < 2:
                raise SchemaError(f"categorical variable {self.name!r} needs >= 2 levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"variable {self.name!r} has duplicate level labels")

    @property
    def width(self) -> int:
        """Encoded channel count: 1 for numeric, one channel per level otherwise."""
        return 1 if self.kind == NUMERIC else len(self.levels)

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC


@dataclass(frozen=True)
class DatasetSchema:
    """Ordered variable declarations plus the padded episode length."""

    variables: tuple[VariableSpec, ...]
    max_length: int
    time_unit: str = "step"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.max_length < 1:
            raise SchemaError("max_length must be a positive integer")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names in schema")
        if not names:
            raise SchemaError("schema declares no variables")

    @property
    def encoded_width(self) -> int:
        """Total channel count N across all variables."""
        return sum(v.width for v in self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def numeric_names(self) -> list[str]:
        return [v.name for v in self.variables if v.is_numeric]

    @property
    def non_numeric_names(self) -> list[str]:
        return [v.name for v in self.variables if not v.is_numeric]

    def variable(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise SchemaError(f"unknown variable {name!r}")

    def column_slices(self) -> dict[str, slice]:
        """Channel slice of each variable within the encoded N axis, in order."""
        out, start = {}, 0
        for v in self.variables:
            out[v.name] = slice(start, start + v.width)
            start += v.width
        return out

    def with_ranges_from(self, table: pd.DataFrame) -> "DatasetSchema":
        """Fill missing numeric ranges with observed [min, max] and freeze them."""
        new_vars = []
        for v in self.variables:
            if v.is_numeric and v.range is None:
                vals = pd.to_numeric(table[v.name], errors="raise").to_numpy(float)
                lo, hi = float(np.min(vals)), float(np.max(vals))
                if not (lo < hi):
                    raise SchemaError(
                        f"numeric variable {v.name!r} has degenerate range [{lo}, {hi}]"
                    )
                v = replace(v, range=(lo, hi))
            new_vars.append(v)
        return replace(self, variables=tuple(new_vars))

    def to_json(self, path: str | Path) -> None:
        doc = {
            "time_unit": self.time_unit,
            "max_length": self.max_length,
            "variables": [
                {
                    "name": v.name,
                    "kind": v.kind,
                    **({"levels": list(v.levels)} if v.levels else {}),
                    **({"range": list(v.range)} if v.range is not None else {}),
                }
                for v in self.variables
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "DatasetSchema":
        doc = json.loads(Path(path).read_text())
        variables = tuple(
            VariableSpec(
                name=v["name"],
                kind=v["kind"],
                levels=tuple(v.get("levels", ())),
                range=tuple(v["range"]) if "range" in v else None,
            )
            for v in doc["variables"]
        )
        return cls(
            variables=variables,
            max_length=int(doc["max_length"]),
            time_unit=doc.get("time_unit", "step"),
        )


@dataclass
class EpisodeBatch:
    """Encoded episodes: ``data`` is (B, 1, L, N); padding beyond ``lengths`` is zero."""

    data: np.ndarray
    lengths: np.ndarray
    schema: DatasetSchema
    patient_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        b, c, length, width = self.data.shape
        if c != 1:
            raise SchemaError(f"expected a single feature channel, got {c}")
        if length != self.schema.max_length or width != self.schema.encoded_width:
            raise SchemaError(
                f"tensor shape {self.data.shape} does not match schema "
                f"(L={self.schema.max_length}, N={self.schema.encoded_width})"
            )
        if self.lengths.shape != (b,):
            raise SchemaError("lengths must have one entry per episode")
        if np.any(self.lengths < 0) or np.any(self.lengths > length):
            raise SchemaError("episode lengths must lie in [0, max_length]")

    @property
    def n_episodes(self) -> int:
        return self.data.shape[0]


def _required_columns(schema: DatasetSchema) -> list[str]:
    return schema.names + [ID_COLUMN, TIME_COLUMN]


def validate_table(table: pd.DataFrame, schema: DatasetSchema) -> None:
    """Check structure and values of a record table against its schema.

    Raises SchemaError for unknown level labels or missing values, and
    TableFormatError for missing columns, duplicate (id, time) pairs,
    non-contiguous time indices, or over-long episodes.
    """
    for col in _required_columns(schema):
        if col not in table.columns:
            raise TableFormatError(f"missing column {col!r}")
    if len(table) == 0:
        raise TableFormatError("table has no rows")

    pid = table[ID_COLUMN].astype(str).to_numpy()
    t = table[TIME_COLUMN].to_numpy()
    if not np.issubdtype(np.asarray(t).dtype, np.integer):
        t_float = pd.to_numeric(table[TIME_COLUMN], errors="raise").to_numpy(float)
        if np.any(t_float != np.round(t_float)):
            raise TableFormatError(f"{TIME_COLUMN!r} must hold integers")
        t = t_float.astype(np.int64)

    codes, _ = pd.factorize(pid)
    order = np.lexsort((t, codes))
    codes_sorted, t_sorted = codes[order], t[order]
    starts = np.flatnonzero(np.r_[True, codes_sorted[1:] != codes_sorted[:-1]])
    group_offset = np.repeat(starts, np.diff(np.r_[starts, len(codes_sorted)]))
    expected = np.arange(len(codes_sorted)) - group_offset
    bad = np.flatnonzero(t_sorted != expected)
    if bad.size:
        i = order[bad[0]]
        dup = pd.DataFrame({"p": pid, "t": t}).duplicated().any()
        kind = "duplicate (patient_id, time_index)" if dup else "non-contiguous time_index"
        raise TableFormatError(f"{kind} at row {i} (patient {pid[i]!r}, time {t[i]})")

    lengths = np.bincount(codes)
    if np.any(lengths > schema.max_length):
        who = np.flatnonzero(lengths > schema.max_length)[0]
        raise TableFormatError(
            f"episode for patient {pd.unique(pid)[who]!r} has {lengths[who]} steps "
            f"(schema max_length is {schema.max_length})"
        )

    for v in schema.variables:
        col = table[v.name]
        if col.isna().any():
            row = int(np.flatnonzero(col.isna().to_numpy())[0])
            raise SchemaError(f"missing value for {v.name!r} at row {row}")
        if v.is_numeric:
            pd.to_numeric(col, errors="raise")
        else:
            vals = col.astype(str)
            known = set(v.levels)
            unknown = ~vals.isin(known).to_numpy()
            if unknown.any():
                row = int(np.flatnonzero(unknown)[0])
                raise SchemaError(
                    f"unknown level {vals.iloc[row]!r} for variable {v.name!r} at row {row}"
                )


def _encode_columns(table: pd.DataFrame, schema: DatasetSchema) -> np.ndarray:
    """Row-wise encoded matrix (n_rows, N): scaled numerics and one-hot groups."""
    n = len(table)
    out = np.zeros((n, schema.encoded_width), dtype=np.float64)
    for v, sl in zip(schema.variables, schema.column_slices().values()):
        if v.is_numeric:
            if v.range is None:
                raise SchemaError(
                    f"numeric variable {v.name!r} has no range; "
                    "fit it from data or declare one"
                )
            lo, hi = v.range
            vals = pd.to_numeric(table[v.name], errors="raise").to_numpy(np.float64)
            out[:, sl.start] = np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
        else:
            codes = pd.Categorical(table[v.name].astype(str), categories=v.levels).codes
            if np.any(codes < 0):
                row = int(np.flatnonzero(codes < 0)[0])
                raise SchemaError(
                    f"unknown level {table[v.name].iloc[row]!r} for variable {v.name!r}"
                )
            out[np.arange(n), sl.start + codes] = 1.0
    return out


def encode_rows(table: pd.DataFrame, schema: DatasetSchema) -> np.ndarray:
    """Encode each record row independently to an (n_rows, N) float matrix."""
    validate_table(table, schema)
    return _encode_columns(table, schema)


def encode(table: pd.DataFrame, schema: DatasetSchema) -> EpisodeBatch:
    """Encode a record table into a zero-padded (B, 1, L, N) episode tensor."""
    validate_table(table, schema)
    codes, uniques = pd.factorize(table[ID_COLUMN].astype(str))
    t = table[TIME_COLUMN].to_numpy(np.int64)
    lengths = np.bincount(codes)
    rows = _encode_columns(table, schema)
    data = np.zeros(
        (len(uniques), 1, schema.max_length, schema.encoded_width), dtype=np.float64
    )
    data[codes, 0, t, :] = rows
    return EpisodeBatch(
        data=data,
        lengths=lengths,
        schema=schema,
        patient_ids=tuple(str(u) for u in uniques),
    )


def decode(batch: EpisodeBatch) -> pd.DataFrame:
    """Invert :func:`encode`: clamp + rescale numerics, argmax one-hot groups.

    Rows beyond each episode's length are omitted.  Out-of-range numeric
    channels (possible after reverse diffusion) are clamped into [0, 1]
    before rescaling, so decoded values always lie in the schema range.
    """
    schema = batch.schema
    x = np.asarray(batch.data[:, 0, :, :], dtype=np.float64)
    b = batch.n_episodes
    ids = batch.patient_ids or tuple(str(i) for i in range(b))

    lengths = batch.lengths
    bidx = np.repeat(np.arange(b), lengths)
    tidx = np.concatenate([np.arange(k) for k in lengths]) if b else np.empty(0, int)
    rows = x[bidx, tidx, :]

    out = {}
    for v, sl in zip(schema.variables, schema.column_slices().values()):
        if v.is_numeric:
            lo, hi = v.range
            out[v.name] = lo + np.clip(rows[:, sl.start], 0.0, 1.0) * (hi - lo)
        else:
            idx = np.argmax(rows[:, sl], axis=1)
            out[v.name] = np.asarray(v.levels, dtype=object)[idx]
    out[ID_COLUMN] = np.asarray(ids, dtype=object)[bidx]
    out[TIME_COLUMN] = tidx
    return pd.DataFrame(out, columns=_required_columns(schema))


def infer_lengths(data: np.ndarray, schema: DatasetSchema, threshold: float = 0.5) -> np.ndarray:
    """Recover episode lengths from the trailing near-zero padding region.

    A timestep counts as padding when its mean one-hot group mass falls
    below ``threshold``; the episode ends at the last non-padding step.
    Schemas without non-numeric variables cannot signal padding this way
    and are treated as full length.
    """
    groups = [sl for v, sl in zip(schema.variables, schema.column_slices().values())
              if not v.is_numeric]
    b, _, length, _ = data.shape
    if not groups:
        return np.full(b, length, dtype=np.int64)
    x = np.asarray(data[:, 0, :, :], dtype=np.float64)
    mass = np.mean([np.abs(x[:, :, sl]).sum(axis=2) for sl in groups], axis=0)
    valid = mass >= threshold  # (B, L)
    has_any = valid.any(axis=1)
    last = length - 1 - np.argmax(valid[:, ::-1], axis=1)
    return np.where(has_any, last + 1, 0).astype(np.int64)


def load_csv(path: str | Path, schema: DatasetSchema) -> pd.DataFrame:
    """Read a record table laid out as schema variables, then patient id, then time.

    Raises TableFormatError (with a 0-based data row number) for missing
    columns, malformed numbers, or duplicate (id, time) pairs.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    expected = _required_columns(schema)
    if list(df.columns) != expected:
        missing = [c for c in expected if c not in df.columns]
        if missing:
            raise TableFormatError(f"missing column {missing[0]!r} in {path}")
        raise TableFormatError(
            f"unexpected column layout in {path}: got {list(df.columns)}, want {expected}"
        )

    def _numeric(col: str, as_int: bool):
        vals = pd.to_numeric(df[col].replace("", np.nan), errors="coerce")
        bad = vals.isna().to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise TableFormatError(
                f"malformed value {df[col].iloc[row]!r} in column {col!r} at row {row}"
            )
        return vals.to_numpy(np.int64 if as_int else np.float64)

    out = pd.DataFrame(index=df.index)
    for v in schema.variables:
        out[v.name] = _numeric(v.name, as_int=False) if v.is_numeric else df[v.name]
    out[ID_COLUMN] = df[ID_COLUMN]
    out[TIME_COLUMN] = _numeric(TIME_COLUMN, as_int=True)

    dup = out.duplicated(subset=[ID_COLUMN, TIME_COLUMN]).to_numpy()
    if dup.any():
        row = int(np.flatnonzero(dup)[0])
        raise TableFormatError(
            f"duplicate ({ID_COLUMN}, {TIME_COLUMN}) pair at row {row}"
        )
    return out


def save_csv(table: pd.DataFrame, path: str | Path, schema: DatasetSchema) -> None:
    """Write a record table as CSV in the published column order."""
    cols = _required_columns(schema)
    for c in cols:
        if c not in table.columns:
            raise TableFormatError(f"missing column {c!r}")
    table[cols].to_csv(path, index=False)


def fixture_path(name: str) -> Path:
    """Path of a bundled schema fixture: 'hiv', 'hypotension' or 'sepsis'."""
    p = Path(__file__).parent / "fixtures" / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"no bundled schema fixture named {name!r}")
    return p


def load_fixture(name: str) -> DatasetSchema:
    return DatasetSchema.from_json(fixture_path(name))
