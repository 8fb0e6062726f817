import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mixdiff.privacy import RISK_THRESHOLD, disclosure_risk, min_euclidean_distance
from mixdiff.schema import DatasetSchema, VariableSpec, encode
from mixdiff.toydata import generate_toy_table, toy_schema


@pytest.fixture
def vec3_schema():
    return DatasetSchema(
        variables=(
            VariableSpec("a", "numeric", range=(0.0, 1.0)),
            VariableSpec("b", "numeric", range=(0.0, 1.0)),
            VariableSpec("c", "numeric", range=(0.0, 1.0)),
        ),
        max_length=1,
    )


def vec_table(rows, prefix):
    return pd.DataFrame(
        {
            "a": [r[0] for r in rows],
            "b": [r[1] for r in rows],
            "c": [r[2] for r in rows],
            "patient_id": [f"{prefix}{i}" for i in range(len(rows))],
            "time_index": 0,
        }
    )


class TestMinDistance:
    def test_copied_episode_gives_zero(self, vec3_schema):
        real = vec_table([(0.1, 0.2, 0.3), (0.5, 0.5, 0.5)], "r")
        syn = vec_table([(0.5, 0.5, 0.5)], "s")
        assert min_euclidean_distance(real, syn, vec3_schema) == 0.0

    def test_unit_offset(self, vec3_schema):
        real = vec_table([(0.0, 0.25, 0.75)], "r")
        syn = vec_table([(1.0, 0.25, 0.75)], "s")
        assert min_euclidean_distance(real, syn, vec3_schema) == pytest.approx(1.0)

    def test_matches_brute_force(self, vec3_schema):
        rng = np.random.default_rng(0)
        real = vec_table(rng.uniform(size=(100, 3)), "r")
        syn = vec_table(rng.uniform(size=(100, 3)), "s")
        got = min_euclidean_distance(real, syn, vec3_schema)
        a = encode(real, vec3_schema).data.reshape(100, -1)
        b = encode(syn, vec3_schema).data.reshape(100, -1)
        best = math.inf
        for i in range(100):
            for j in range(100):
                best = min(best, float(np.linalg.norm(b[i] - a[j])))
        assert abs(got - best) < 1e-9

    def test_row_permutation_invariant(self):
        schema = toy_schema(8)
        real = generate_toy_table(20, 8, seed=1)
        syn = generate_toy_table(20, 8, seed=2)
        base = min_euclidean_distance(real, syn, schema)
        shuffled = syn.sample(frac=1.0, random_state=0).reset_index(drop=True)
        assert min_euclidean_distance(real, shuffled, schema) == base


def quasi_table(rows, prefix):
    # rows: (gender, group) static per patient, two timesteps each
    frames = []
    for i, (g, e) in enumerate(rows):
        frames.append(
            pd.DataFrame(
                {
                    "gender": [g, g],
                    "group": [e, e],
                    "patient_id": f"{prefix}{i}",
                    "time_index": [0, 1],
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


@pytest.fixture
def quasi_schema():
    return DatasetSchema(
        variables=(
            VariableSpec("gender", "binary", levels=("F", "M")),
            VariableSpec("group", "categorical", levels=("w", "x", "y", "z")),
        ),
        max_length=2,
    )


class TestDisclosureRisk:
    def test_absent_classes_give_zero(self, quasi_schema):
        real = quasi_table([("F", "w"), ("F", "w")], "r")
        syn = quasi_table([("M", "z"), ("M", "y")], "s")
        report = disclosure_risk(real, syn, quasi_schema, ["gender", "group"])
        assert report.risk == 0.0
        assert report.passed

    def test_hand_case_eighth(self, quasi_schema):
        # one synthetic patient in a real class of size 4, one in an absent
        # class: (1/2) * (1/4 + 0) = 0.125, which fails the 9% threshold
        real = quasi_table([("F", "w")] * 4, "r")
        syn = quasi_table([("F", "w"), ("M", "z")], "s")
        report = disclosure_risk(real, syn, quasi_schema, ["gender", "group"])
        assert report.risk == 0.125
        assert not report.passed

    def test_singleton_classes_give_one(self, quasi_schema):
        real = quasi_table([("F", "w"), ("M", "x")], "r")
        syn = quasi_table([("F", "w"), ("M", "x")], "s")
        report = disclosure_risk(real, syn, quasi_schema, ["gender", "group"])
        assert report.risk == 1.0

    def test_risk_shrinks_as_classes_grow(self, quasi_schema):
        syn = quasi_table([("F", "w")], "s")
        small = quasi_table([("F", "w")] * 2, "r")
        large = quasi_table([("F", "w")] * 10, "r")
        r_small = disclosure_risk(small, syn, quasi_schema, ["gender", "group"]).risk
        r_large = disclosure_risk(large, syn, quasi_schema, ["gender", "group"]).risk
        assert r_large < r_small

    def test_numeric_quasi_identifier_needs_rule(self, vec3_schema):
        tbl = vec_table([(0.1, 0.2, 0.3)], "r")
        with pytest.raises(ValueError, match="binning"):
            disclosure_risk(tbl, tbl, vec3_schema, ["a"])

    def test_numeric_binning_rule_applied(self, vec3_schema):
        real = vec_table([(0.12, 0, 0), (0.18, 0, 0)], "r")
        syn = vec_table([(0.11, 0, 0)], "s")
        rule = {"a": lambda v: math.floor(v * 10)}
        report = disclosure_risk(real, syn, vec3_schema, ["a"], numeric_binning=rule)
        assert report.risk == 0.5  # both real patients share bin 1

    def test_report_fields(self, quasi_schema):
        real = quasi_table([("F", "w"), ("F", "x")], "r")
        syn = quasi_table([("F", "w")], "s")
        report = disclosure_risk(
            real, syn, quasi_schema, ["gender", "group"], min_distance=1.5
        )
        doc = report.to_dict()
        assert doc["threshold"] == RISK_THRESHOLD
        assert doc["n_classes_real"] == 2
        assert doc["n_classes_shared"] == 1
        assert doc["min_distance"] == 1.5


def test_threshold_literal_single_source():
    src_dir = Path(__file__).resolve().parents[1] / "src" / "mixdiff"
    hits = []
    for path in src_dir.rglob("*.py"):
        text = path.read_text()
        hits += [path.name] * text.count("0.09")
    assert hits == ["privacy.py"]
