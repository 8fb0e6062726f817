"""Per-variable realism checks: the four-test cascade and KL divergence.

The cascade repeatedly draws small real/synthetic batches and, per
variable, runs a two-sample KS test, a Welch t-test and an F-test
(numeric), or KS plus a one-way ANOVA F-test on one-hot level indicators
(non-numeric), counting passes over the repetitions.  A three-sigma
plausible-range check covers numeric variables.  KL divergence compares
binned (numeric) or level (non-numeric) frequencies on the full tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .schema import DatasetSchema, validate_table

DEFAULT_ALPHA = 0.05


class DegenerateVarianceError(ValueError):
    """The F-test denominator variance is zero."""


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    passed: bool


def ks_test(a, b, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Two-sample Kolmogorov-Smirnov test; passes when p >= alpha."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs non-empty samples")
    res = stats.ks_2samp(a, b, method="asymp")
    return TestResult(float(res.statistic), float(res.pvalue), bool(res.pvalue >= alpha))


def t_test(a, b, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Welch two-sample t-test on means; passes when p >= alpha.

    With zero variance in both samples the test degenerates: equal means
    pass by convention, unequal means fail.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("t-test needs n >= 2 per sample")
    if np.var(a, ddof=1) == 0.0 and np.var(b, ddof=1) == 0.0:
        same = a.mean() == b.mean()
        return TestResult(0.0 if same else np.inf, 1.0 if same else 0.0, same)
    res = stats.ttest_ind(a, b, equal_var=False)
    return TestResult(float(res.statistic), float(res.pvalue), bool(res.pvalue >= alpha))


def _anova_f(groups: list[np.ndarray]) -> tuple[float, float]:
    """One-way ANOVA F statistic and p-value across the given groups."""
    k = len(groups)
    n = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df1, df2 = k - 1, n - k
    if ss_within == 0.0:
        if ss_between == 0.0:
            return 0.0, 1.0
        return np.inf, 0.0
    f = (ss_between / df1) / (ss_within / df2)
    return float(f), float(stats.f.sf(f, df1, df2))


def f_test(a, b, alpha: float = DEFAULT_ALPHA, kind: str = "numeric") -> TestResult:
    """Variance agreement between two samples.

    numeric: two-sided variance-ratio F-test.  non-numeric: the samples
    are level indices; a one-way ANOVA F-test is run per level on one-hot
    indicators and the variable passes only if every level passes (at a
    per-level threshold of alpha divided by the level count).
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("F-test needs n >= 2 per sample")
    if kind == "numeric":
        va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
        if vb == 0.0:
            if va == 0.0:
                return TestResult(1.0, 1.0, True)
            raise DegenerateVarianceError("zero variance in the denominator sample")
        f = float(va / vb)
        cdf = stats.f.cdf(f, a.size - 1, b.size - 1)
        p = float(2.0 * min(cdf, 1.0 - cdf))
        return TestResult(f, p, bool(p >= alpha))

    levels = np.unique(np.concatenate([a, b]))
    worst = TestResult(0.0, 1.0, True)
    threshold = alpha / max(len(levels), 1)
    all_pass = True
    for lv in levels:
        ga, gb = (a == lv).astype(float), (b == lv).astype(float)
        if np.all(ga == ga[0]) and np.all(gb == gb[0]) and ga[0] == gb[0]:
            continue  # level absent (or saturated) in both samples alike
        f, p = _anova_f([ga, gb])
        if p < worst.p_value:
            worst = TestResult(f, p, bool(p >= threshold))
        all_pass = all_pass and (p >= threshold)
    return TestResult(worst.statistic, worst.p_value, bool(all_pass))


def three_sigma_test(real, syn, k: float = 2.0) -> tuple[float, bool]:
    """Fraction of synthetic values inside mean(real) +/- k*sd(real); passes iff all are."""
    real, syn = np.asarray(real, float), np.asarray(syn, float)
    if real.size < 2:
        raise ValueError("three-sigma test needs n >= 2 real values")
    mu, sd = real.mean(), real.std(ddof=1)
    inside = (syn >= mu - k * sd) & (syn <= mu + k * sd)
    frac = float(inside.mean()) if syn.size else 1.0
    return frac, bool(inside.all())


@dataclass
class CascadeResult:
    """Pass counts per variable over the repeated batch protocol.

    ``counts`` has one row per variable with columns ks, t, f,
    three_sigma; t and three_sigma are null for non-numeric variables.
    """

    counts: pd.DataFrame
    alpha: float
    repetitions: int
    batch_size: int

    def to_csv(self, path: str | Path) -> None:
        """Formatted "X/R" cells (dashed where not applicable) plus raw counts."""
        out = self.counts.copy()
        for col in ("ks", "t", "f", "three_sigma"):
            raw = out[col]
            out[col] = [
                "- -" if pd.isna(v) else f"{int(v)}/{self.repetitions}" for v in raw
            ]
            out[f"{col}_count"] = raw
        out.to_csv(path, index=False)


def run_cascade(
    real: pd.DataFrame,
    syn: pd.DataFrame,
    schema: DatasetSchema,
    alpha: float = DEFAULT_ALPHA,
    repetitions: int = 100,
    batch_size: int = 32,
    seed: int = 0,
    sigma_k: float = 2.0,
) -> CascadeResult:
    """Run the batched test protocol and count passes per variable.

    Every repetition draws ``batch_size`` rows from each table and runs
    every applicable test (the tests are reported independently; the
    KS-first ordering is interpretive).  The three-sigma plausible range
    is fixed from the full real table, then checked against each
    synthetic batch.  Reproducible given the seed; the per-repetition
    random streams are split so repetitions are order-independent.
    """
    validate_table(real, schema)
    validate_table(syn, schema)

    real_cols: dict[str, np.ndarray] = {}
    syn_cols: dict[str, np.ndarray] = {}
    for v in schema.variables:
        if v.is_numeric:
            real_cols[v.name] = real[v.name].to_numpy(float)
            syn_cols[v.name] = syn[v.name].to_numpy(float)
        else:
            real_cols[v.name] = pd.Categorical(
                real[v.name].astype(str), categories=v.levels
            ).codes.astype(float)
            syn_cols[v.name] = pd.Categorical(
                syn[v.name].astype(str), categories=v.levels
            ).codes.astype(float)

    sigma_ref = {
        name: (real_cols[name].mean(), real_cols[name].std(ddof=1))
        for name in schema.numeric_names
    }

    names = schema.names
    counts = {name: {"ks": 0, "t": 0, "f": 0, "three_sigma": 0} for name in names}
    n_real, n_syn = len(real), len(syn)
    if batch_size > min(n_real, n_syn):
        raise ValueError("batch_size exceeds the available rows")

    for child in np.random.SeedSequence(seed).spawn(repetitions):
        # identically re-seeded streams: unrelated tables get independent
        # draws, while identical tables get identical batches (so comparing
        # a file against itself passes every repetition exactly)
        ridx = np.random.default_rng(child).choice(n_real, size=batch_size, replace=False)
        sidx = np.random.default_rng(child).choice(n_syn, size=batch_size, replace=False)
        for v in schema.variables:
            a = real_cols[v.name][ridx]
            s = syn_cols[v.name][sidx]
            counts[v.name]["ks"] += ks_test(a, s, alpha).passed
            if v.is_numeric:
                counts[v.name]["t"] += t_test(a, s, alpha).passed
                try:
                    counts[v.name]["f"] += f_test(a, s, alpha, kind="numeric").passed
                except DegenerateVarianceError:
                    pass  # counted as a failure
                mu, sd = sigma_ref[v.name]
                lo, hi = mu - sigma_k * sd, mu + sigma_k * sd
                counts[v.name]["three_sigma"] += bool(np.all((s >= lo) & (s <= hi)))
            else:
                counts[v.name]["f"] += f_test(a, s, alpha, kind="non-numeric").passed

    rows = []
    for v in schema.variables:
        c = counts[v.name]
        rows.append(
            {
                "variable": v.name,
                "kind": v.kind,
                "ks": c["ks"],
                "t": c["t"] if v.is_numeric else np.nan,
                "f": c["f"],
                "three_sigma": c["three_sigma"] if v.is_numeric else np.nan,
            }
        )
    return CascadeResult(
        counts=pd.DataFrame(rows),
        alpha=alpha,
        repetitions=repetitions,
        batch_size=batch_size,
    )


@dataclass(frozen=True)
class KlResult:
    value: float
    smoothed_cells: int  # cells with zero real mass but synthetic mass


def kl_divergence(
    real,
    syn,
    kind: str = "numeric",
    bins: int = 20,
    smoothing: float = 1e-9,
    levels: tuple[str, ...] | None = None,
) -> KlResult:
    """KL divergence of the synthetic (learned) distribution from the real one.

    Numeric samples are binned into ``bins`` equal-width classes over the
    pooled range; non-numeric samples use level frequencies.  Natural
    log, synthetic distribution first.  ``smoothing`` is added to every
    cell before normalising so empty real cells stay finite; affected
    cells are counted in the result.
    """
    real, syn = np.asarray(real), np.asarray(syn)
    if real.size == 0 or syn.size == 0:
        raise ValueError("KL divergence needs non-empty samples")
    if kind == "numeric":
        real, syn = real.astype(float), syn.astype(float)
        lo = min(real.min(), syn.min())
        hi = max(real.max(), syn.max())
        if lo == hi:
            return KlResult(0.0, 0)
        p_real, _ = np.histogram(real, bins=bins, range=(lo, hi))
        p_syn, _ = np.histogram(syn, bins=bins, range=(lo, hi))
    else:
        cats = list(levels) if levels is not None else list(
            np.unique(np.concatenate([real.astype(str), syn.astype(str)]))
        )
        r_codes = pd.Categorical(real.astype(str), categories=cats).codes
        s_codes = pd.Categorical(syn.astype(str), categories=cats).codes
        p_real = np.bincount(r_codes[r_codes >= 0], minlength=len(cats))
        p_syn = np.bincount(s_codes[s_codes >= 0], minlength=len(cats))
    smoothed = int(np.sum((p_real == 0) & (p_syn > 0)))
    p = (p_syn + smoothing) / (p_syn + smoothing).sum()
    q = (p_real + smoothing) / (p_real + smoothing).sum()
    return KlResult(float(np.sum(p * np.log(p / q))), smoothed)


def kl_table(
    real: pd.DataFrame,
    syn: pd.DataFrame,
    schema: DatasetSchema,
    bins: int = 20,
    smoothing: float = 1e-9,
) -> pd.DataFrame:
    """Per-variable KL divergences on the full tables."""
    rows = []
    for v in schema.variables:
        if v.is_numeric:
            res = kl_divergence(
                real[v.name].to_numpy(float),
                syn[v.name].to_numpy(float),
                kind="numeric",
                bins=bins,
                smoothing=smoothing,
            )
        else:
            res = kl_divergence(
                real[v.name].astype(str).to_numpy(),
                syn[v.name].astype(str).to_numpy(),
                kind=v.kind,
                smoothing=smoothing,
                levels=v.levels,
            )
        rows.append(
            {
                "variable": v.name,
                "kind": v.kind,
                "kl_divergence": res.value,
                "smoothed_cells": res.smoothed_cells,
            }
        )
    return pd.DataFrame(rows)
