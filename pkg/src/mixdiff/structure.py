"""Cross-variable and cohort structure metrics.

Kendall tau-b correlation matrices (static, and dynamic over per-patient
trend/cycle decompositions), the log-cluster realism score over a merged
k-means clustering, category coverage of non-numeric levels, and joint
demographic cross-tabs.  Non-numeric variables enter correlations via
their level index and clustering via their one-hot encoding.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans

from .schema import (
    DatasetSchema,
    ID_COLUMN,
    TIME_COLUMN,
    encode_rows,
    validate_table,
)

LOG_CLUSTER_FLOOR = math.log(1e-12)


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau-b of two equal-length sequences.

    Exact integer pair counting (chunked, so n in the tens of thousands
    is fine).  Returns nan when either sequence is entirely tied, which
    callers treat as a flagged null entry.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau needs two 1-D sequences of equal length")
    n = a.size
    if n < 2:
        raise ValueError("kendall_tau needs n >= 2")

    concordant = discordant = ties_a = ties_b = 0
    cols = np.arange(n)
    chunk = max(1, min(n, 2_000_000 // max(n, 1)))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        da = np.sign(a[None, :] - a[rows, None])
        db = np.sign(b[None, :] - b[rows, None])
        upper = cols[None, :] > rows[:, None]
        prod = da * db
        concordant += int(np.count_nonzero((prod > 0) & upper))
        discordant += int(np.count_nonzero((prod < 0) & upper))
        ties_a += int(np.count_nonzero((da == 0) & upper))
        ties_b += int(np.count_nonzero((db == 0) & upper))

    n0 = n * (n - 1) // 2
    denom_a = n0 - ties_a
    denom_b = n0 - ties_b
    if denom_a == 0 or denom_b == 0:
        return float("nan")
    return (concordant - discordant) / math.sqrt(denom_a * denom_b)


def _correlation_columns(table: pd.DataFrame, schema: DatasetSchema) -> pd.DataFrame:
    """Variables as float columns: raw numerics, level indices otherwise."""
    out = {}
    for v in schema.variables:
        if v.is_numeric:
            out[v.name] = table[v.name].to_numpy(float)
        else:
            out[v.name] = pd.Categorical(
                table[v.name].astype(str), categories=v.levels
            ).codes.astype(float)
    return pd.DataFrame(out)


def _tau_matrix(cols: pd.DataFrame) -> pd.DataFrame:
    names = list(cols.columns)
    k = len(names)
    m = np.full((k, k), np.nan)
    arrays = [cols[n].to_numpy(float) for n in names]
    for i in range(k):
        if np.any(arrays[i] != arrays[i][0]):
            m[i, i] = 1.0
        for j in range(i + 1, k):
            m[i, j] = m[j, i] = kendall_tau(arrays[i], arrays[j])
    return pd.DataFrame(m, index=names, columns=names)


def static_correlations(table: pd.DataFrame, schema: DatasetSchema) -> pd.DataFrame:
    """Pairwise tau-b over all rows pooled across patients and time."""
    validate_table(table, schema)
    if len(table) < 2:
        raise ValueError("need at least 2 rows")
    return _tau_matrix(_correlation_columns(table, schema))


@dataclass
class DecomposedSeries:
    """Per-patient additive split of each variable into a fitted line and residuals.

    ``trend`` and ``cycle`` mirror the (filtered) input table; their sum
    reconstructs the level-index representation exactly.  Patients with a
    single timestep cannot be decomposed and are counted in
    ``excluded_patients``.
    """

    trend: pd.DataFrame
    cycle: pd.DataFrame
    excluded_patients: int


def decompose(table: pd.DataFrame, schema: DatasetSchema) -> DecomposedSeries:
    """Least-squares line over time per patient-variable; residual is the cycle."""
    validate_table(table, schema)
    cols = _correlation_columns(table, schema)
    pid = table[ID_COLUMN].astype(str).to_numpy()
    t = table[TIME_COLUMN].to_numpy(float)

    codes, _ = pd.factorize(pid)
    lengths = np.bincount(codes)
    keep = lengths[codes] >= 2
    excluded = int(np.sum(lengths < 2))
    if excluded:
        warnings.warn(f"excluded {excluded} single-step patients from decomposition")

    trend = pd.DataFrame(index=np.flatnonzero(keep), columns=cols.columns, dtype=float)
    cycle = trend.copy()
    for name in cols.columns:
        y = cols[name].to_numpy(float)
        # closed-form per-group OLS of y on t
        cnt = np.bincount(codes)
        sum_t = np.bincount(codes, weights=t)
        sum_y = np.bincount(codes, weights=y)
        sum_tt = np.bincount(codes, weights=t * t)
        sum_ty = np.bincount(codes, weights=t * y)
        denom = cnt * sum_tt - sum_t**2
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(denom > 0, (cnt * sum_ty - sum_t * sum_y) / denom, 0.0)
            intercept = np.where(cnt > 0, (sum_y - slope * sum_t) / cnt, 0.0)
        fit = intercept[codes] + slope[codes] * t
        trend[name] = fit[keep]
        cycle[name] = (y - fit)[keep]

    meta = {ID_COLUMN: pid[keep], TIME_COLUMN: table[TIME_COLUMN].to_numpy()[keep]}
    for k_, v_ in meta.items():
        trend[k_] = v_
        cycle[k_] = v_
    return DecomposedSeries(
        trend=trend.reset_index(drop=True),
        cycle=cycle.reset_index(drop=True),
        excluded_patients=excluded,
    )


@dataclass
class DynamicCorrelations:
    """Entrywise patient averages of per-patient tau matrices."""

    trend: pd.DataFrame
    cycle: pd.DataFrame
    null_counts_trend: pd.DataFrame
    null_counts_cycle: pd.DataFrame


def dynamic_correlations(table: pd.DataFrame, schema: DatasetSchema) -> DynamicCorrelations:
    """Per-patient tau matrices on trend and cycle components, averaged.

    Null (all-tied) entries are excluded from the average; how often each
    entry was null is reported alongside.
    """
    parts = decompose(table, schema)
    if len(parts.trend) == 0:
        raise ValueError("no decomposable patients")
    names = schema.names

    sums = {key: np.zeros((len(names), len(names))) for key in ("trend", "cycle")}
    valid = {key: np.zeros((len(names), len(names)), dtype=int) for key in ("trend", "cycle")}
    nulls = {key: np.zeros((len(names), len(names)), dtype=int) for key in ("trend", "cycle")}

    for key, frame in (("trend", parts.trend), ("cycle", parts.cycle)):
        for _, group in frame.groupby(ID_COLUMN, sort=False):
            m = _tau_matrix(group[names])
            vals = m.to_numpy()
            ok = np.isfinite(vals)
            sums[key][ok] += vals[ok]
            valid[key] += ok
            nulls[key] += ~ok

    out = {}
    for key in ("trend", "cycle"):
        with np.errstate(invalid="ignore"):
            mean = np.where(valid[key] > 0, sums[key] / valid[key], np.nan)
        out[key] = pd.DataFrame(mean, index=names, columns=names)
    return DynamicCorrelations(
        trend=out["trend"],
        cycle=out["cycle"],
        null_counts_trend=pd.DataFrame(nulls["trend"], index=names, columns=names),
        null_counts_cycle=pd.DataFrame(nulls["cycle"], index=names, columns=names),
    )


@dataclass
class CorrelationBundle:
    static: pd.DataFrame
    trend: pd.DataFrame
    cycle: pd.DataFrame


def correlation_bundle(table: pd.DataFrame, schema: DatasetSchema) -> CorrelationBundle:
    dyn = dynamic_correlations(table, schema)
    return CorrelationBundle(
        static=static_correlations(table, schema), trend=dyn.trend, cycle=dyn.cycle
    )


def log_cluster_value(labels, is_real, n_clusters: int) -> tuple[float, int]:
    """Log mean squared deviation of per-cluster real share from the global share.

    Empty clusters are skipped (the effective cluster count drops, and is
    returned).  Floored at log(1e-12) when every term is zero.
    """
    labels = np.asarray(labels)
    is_real = np.asarray(is_real, dtype=bool)
    n_real = int(is_real.sum())
    global_share = n_real / is_real.size
    terms = []
    for k in range(n_clusters):
        members = labels == k
        n_k = int(members.sum())
        if n_k == 0:
            continue
        share = is_real[members].sum() / n_k
        terms.append((share - global_share) ** 2)
    if not terms:
        raise ValueError("no non-empty clusters")
    mean_sq = float(np.mean(terms))
    value = math.log(mean_sq) if mean_sq > 0 else LOG_CLUSTER_FLOOR
    return max(value, LOG_CLUSTER_FLOOR), len(terms)


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Row order by content hash so shuffled inputs sample identically."""
    digests = [
        hashlib.sha256(np.ascontiguousarray(r, dtype=np.float64).tobytes()).digest()
        for r in rows
    ]
    return np.array(sorted(range(len(digests)), key=lambda i: (digests[i], i)), dtype=int)


@dataclass
class LogClusterResult:
    value: float
    per_repetition: list[float]
    n_clusters: int
    sample_n: int  # per-dataset rows actually drawn each repetition
    effective_clusters: list[int] = field(default_factory=list)


def log_cluster_u(
    real: pd.DataFrame,
    syn: pd.DataFrame,
    schema: DatasetSchema,
    n_clusters: int = 20,
    repetitions: int = 20,
    sample_n: int = 100_000,
    seed: int = 0,
) -> LogClusterResult:
    """Cluster merged real+synthetic records and score the real-share deviation.

    Rows are encoded (scaled numerics, one-hot levels), sampled per
    repetition (capped at the available rows), clustered with k-means,
    and scored with :func:`log_cluster_value`; the mean over repetitions
    is the headline value (lower is more realistic).
    """
    x_real = encode_rows(real, schema)
    x_syn = encode_rows(syn, schema)
    order_real = _canonical_order(x_real)
    order_syn = _canonical_order(x_syn)
    take = min(sample_n, len(x_real), len(x_syn))
    if take < n_clusters:
        raise ValueError("not enough rows to form the requested clusters")

    values, effective = [], []
    for child in np.random.SeedSequence(seed).spawn(repetitions):
        rng = np.random.default_rng(child)
        ridx = order_real[rng.choice(len(x_real), size=take, replace=False)]
        sidx = order_syn[rng.choice(len(x_syn), size=take, replace=False)]
        merged = np.vstack([x_real[ridx], x_syn[sidx]])
        is_real = np.zeros(2 * take, dtype=bool)
        is_real[:take] = True
        km = KMeans(
            n_clusters=n_clusters,
            init="k-means++",
            n_init=3,
            max_iter=50,
            random_state=int(rng.integers(0, 2**31 - 1)),
        ).fit(merged)
        value, kept = log_cluster_value(km.labels_, is_real, n_clusters)
        values.append(value)
        effective.append(kept)
    return LogClusterResult(
        value=float(np.mean(values)),
        per_repetition=values,
        n_clusters=n_clusters,
        sample_n=take,
        effective_clusters=effective,
    )


@dataclass
class CoverageResult:
    value: float
    per_variable: dict[str, float]


def category_coverage(
    real: pd.DataFrame, syn: pd.DataFrame, schema: DatasetSchema
) -> CoverageResult | None:
    """Mean per-variable share of real non-numeric levels present in the synthetic data.

    Each ratio is capped at 1 so synthetic-only levels cannot inflate
    coverage.  Returns None when the schema has no non-numeric variables.
    """
    names = schema.non_numeric_names
    if not names:
        return None
    per = {}
    for name in names:
        real_levels = set(real[name].astype(str).unique())
        syn_levels = set(syn[name].astype(str).unique())
        per[name] = min(len(syn_levels & real_levels) / len(real_levels), 1.0)
    return CoverageResult(value=float(np.mean(list(per.values()))), per_variable=per)


def demographic_coverage(
    real: pd.DataFrame,
    syn: pd.DataFrame,
    schema: DatasetSchema,
    quasi_vars: list[str],
    numeric_bin_width: dict[str, float] | float | None = None,
) -> tuple[pd.Series, pd.Series]:
    """Joint-level count tables for the quasi-identifier combination.

    Numeric quasi-identifiers require a bin width (single value or per
    variable); bins are floored multiples of the width.  Both returned
    Series share one index over the full level product, including zero
    cells.
    """
    axes = []
    keyed = {"real": [], "syn": []}
    for name in quasi_vars:
        v = schema.variable(name)
        if v.is_numeric:
            if numeric_bin_width is None:
                raise ValueError(f"numeric quasi-identifier {name!r} needs a bin width")
            width = (
                numeric_bin_width[name]
                if isinstance(numeric_bin_width, dict)
                else float(numeric_bin_width)
            )
            observed = []
            for key, tbl in (("real", real), ("syn", syn)):
                binned = np.floor(tbl[name].to_numpy(float) / width).astype(int)
                keyed[key].append([f"[{b * width:g}, {(b + 1) * width:g})" for b in binned])
                observed.extend(np.unique(binned))
            axes.append(
                [f"[{b * width:g}, {(b + 1) * width:g})" for b in sorted(set(observed))]
            )
        else:
            axes.append(list(v.levels))
            for key, tbl in (("real", real), ("syn", syn)):
                keyed[key].append(tbl[name].astype(str).tolist())

    index = pd.MultiIndex.from_product(axes, names=quasi_vars)
    out = {}
    for key in ("real", "syn"):
        tuples = list(zip(*keyed[key]))
        counts = pd.Series(tuples).value_counts()
        counts.index = pd.MultiIndex.from_tuples(counts.index, names=quasi_vars)
        out[key] = counts.reindex(index, fill_value=0).astype(int)
    return out["real"], out["syn"]
