"""Seeded desk-scale toy cohort generator.

Two correlated sinusoidal numerics (shared per-patient phase and
frequency, fixed lag), a binary derived by thresholding the first
numeric, and a slowly regime-switching categorical.  Values are bounded
inside the declared [0, 1] ranges, so the schema never needs refitting.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .schema import DatasetSchema, ID_COLUMN, TIME_COLUMN, VariableSpec

PHASE_LAG = 1.0
NOISE_SD = 0.02
SWITCH_PROB = 0.15
REGIMES = ("alpha", "beta", "gamma")


def toy_schema(length: int = 16) -> DatasetSchema:
    return DatasetSchema(
        variables=(
            VariableSpec("signal_a", "numeric", range=(0.0, 1.0)),
            VariableSpec("signal_b", "numeric", range=(0.0, 1.0)),
            VariableSpec("a_high", "binary", levels=("low", "high")),
            VariableSpec("regime", "categorical", levels=REGIMES),
        ),
        max_length=length,
        time_unit="step",
    )


def generate_toy_table(
    n_patients: int = 500,
    length: int = 16,
    seed: int = 0,
    id_prefix: str = "p",
) -> pd.DataFrame:
    """Deterministic toy cohort with full-length episodes."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)

    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_patients, 1))
    cycles = rng.uniform(0.8, 1.6, size=(n_patients, 1))
    amp = rng.uniform(0.7, 0.95, size=(n_patients, 1))

    angle = 2.0 * np.pi * cycles * t[None, :] / length + phase
    sig_a = 0.5 + 0.5 * amp * np.sin(angle)
    sig_b = 0.5 + 0.5 * amp * np.sin(angle + PHASE_LAG)
    sig_a = np.clip(sig_a + rng.normal(0.0, NOISE_SD, sig_a.shape), 0.0, 1.0)
    sig_b = np.clip(sig_b + rng.normal(0.0, NOISE_SD, sig_b.shape), 0.0, 1.0)

    a_high = np.where(sig_a > 0.5, "high", "low")

    regime = np.empty((n_patients, length), dtype=np.int64)
    regime[:, 0] = rng.integers(0, len(REGIMES), size=n_patients)
    for step in range(1, length):
        switch = rng.random(n_patients) < SWITCH_PROB
        jump = rng.integers(1, len(REGIMES), size=n_patients)
        regime[:, step] = np.where(
            switch, (regime[:, step - 1] + jump) % len(REGIMES), regime[:, step - 1]
        )

    width = len(str(max(n_patients - 1, 1)))
    ids = np.array([f"{id_prefix}{i:0{width}d}" for i in range(n_patients)])
    return pd.DataFrame(
        {
            "signal_a": sig_a.ravel(),
            "signal_b": sig_b.ravel(),
            "a_high": a_high.ravel(),
            "regime": np.asarray(REGIMES, dtype=object)[regime].ravel(),
            ID_COLUMN: np.repeat(ids, length),
            TIME_COLUMN: np.tile(t, n_patients),
        }
    )
