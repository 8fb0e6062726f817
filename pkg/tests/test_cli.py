import json
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

from mixdiff.cli import main
from mixdiff.denoiser import DenoiserConfig, DenoisingUnet, save_checkpoint
from mixdiff.schema import DatasetSchema, load_csv, load_fixture


@pytest.fixture
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def write_config(path: Path, doc: dict) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


class TestToygen:
    def test_outputs_and_determinism(self, runner, tmp_path):
        cfg = write_config(
            tmp_path / "c.json",
            {"toy": {"n_patients": 12, "holdout_patients": 6, "length": 8}, "seed": 4},
        )
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_ok(runner, ["toygen", "--config", cfg, "--out", str(out1)])
        run_ok(runner, ["toygen", "--config", cfg, "--out", str(out2)])
        for name in ("schema.json", "real_train.csv", "real_holdout.csv"):
            assert (out1 / name).read_text() == (out2 / name).read_text()
        schema = DatasetSchema.from_json(out1 / "schema.json")
        table = load_csv(out1 / "real_train.csv", schema)
        assert table["patient_id"].nunique() == 12
        assert not list(out1.glob("*.tmp"))

    def test_generated_table_passes_validation(self, runner, tmp_path):
        cfg = write_config(
            tmp_path / "c.json", {"toy": {"n_patients": 5, "length": 8}}
        )
        out = tmp_path / "o"
        run_ok(runner, ["toygen", "--config", cfg, "--out", str(out)])
        schema = DatasetSchema.from_json(out / "schema.json")
        load_csv(out / "real_train.csv", schema)  # validates or raises

    def test_run_config_archived(self, runner, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"toy": {"n_patients": 3, "length": 8}})
        out = tmp_path / "o"
        run_ok(runner, ["toygen", "--config", cfg, "--seed", "9", "--out", str(out)])
        doc = json.loads((out / "run_config.json").read_text())
        assert doc["seed"] == 9
        assert doc["command"] == "toygen"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """toygen -> train -> sample at micro scale, shared by the pipeline checks."""
    runner = CliRunner()
    root = tmp_path_factory.mktemp("pipeline")
    toy_cfg = write_config(
        root / "toy.json",
        {"toy": {"n_patients": 24, "holdout_patients": 24, "length": 8}, "seed": 1},
    )
    run_ok(runner, ["toygen", "--config", toy_cfg, "--out", str(root / "data")])

    train_cfg = write_config(
        root / "train.json",
        {
            "schema": str(root / "data" / "schema.json"),
            "data": {"train": str(root / "data" / "real_train.csv")},
            "denoiser": {"latent_width": 16, "seq_lengths": [8, 4, 2]},
            "schedule": {"n_steps": 15},
            "train": {
                "epochs": 25,
                "batch_size": 16,
                "projection_widths": [16, 8],
            },
            "seed": 2,
        },
    )
    run_ok(runner, ["train", "--config", train_cfg, "--out", str(root / "run")])

    sample_cfg = write_config(
        root / "sample.json",
        {
            "schema": str(root / "run" / "schema.json"),
            "checkpoint": str(root / "run" / "checkpoints" / "denoiser_final.pt"),
            "schedule": {"n_steps": 15},
            "sample": {"n_patients": 24},
            "seed": 3,
        },
    )
    run_ok(runner, ["sample", "--config", sample_cfg, "--out", str(root / "syn")])
    return root


class TestPipeline:
    def test_train_outputs(self, workspace):
        assert (workspace / "run" / "loss_log.csv").exists()
        assert (workspace / "run" / "checkpoints" / "denoiser_final.pt").exists()
        lines = (workspace / "run" / "loss_log.csv").read_text().splitlines()
        assert len(lines) == 26

    def test_sample_layout(self, workspace):
        schema = DatasetSchema.from_json(workspace / "run" / "schema.json")
        table = load_csv(workspace / "syn" / "synthetic.csv", schema)
        assert table["patient_id"].nunique() == 24
        header = (workspace / "syn" / "synthetic.csv").read_text().splitlines()[0]
        assert header.endswith("patient_id,time_index")

    def test_evaluate(self, workspace, runner, tmp_path):
        cfg = write_config(
            tmp_path / "eval.json",
            {
                "schema": str(workspace / "run" / "schema.json"),
                "data": {
                    "real": str(workspace / "data" / "real_holdout.csv"),
                    "synthetic": str(workspace / "syn" / "synthetic.csv"),
                },
                "evaluate": {
                    "repetitions": 5,
                    "batch_size": 16,
                    "cluster": {"repetitions": 2, "sample_n": 100},
                },
                "seed": 5,
            },
        )
        out = tmp_path / "eval"
        run_ok(runner, ["evaluate", "--config", cfg, "--out", str(out), "--plots"])
        report = json.loads((out / "evaluation_report.json").read_text())
        assert {"cascade", "kl_divergence", "log_cluster", "category_coverage"} <= set(report)
        for kind in ("static", "trend", "cycle"):
            assert (out / f"correlation_{kind}_real.csv").exists()
            assert (out / f"correlation_{kind}_synthetic.csv").exists()
        assert (out / "cascade.csv").exists()
        assert list((out / "plots").glob("*.png"))

    def test_evaluate_identical_files_is_perfect(self, workspace, runner, tmp_path):
        real = str(workspace / "data" / "real_train.csv")
        cfg = write_config(
            tmp_path / "eval2.json",
            {
                "schema": str(workspace / "run" / "schema.json"),
                "data": {"real": real, "synthetic": real},
                "evaluate": {
                    "repetitions": 6,
                    "batch_size": 16,
                    "cluster": {"repetitions": 1, "sample_n": 64},
                },
            },
        )
        out = tmp_path / "eval_same"
        run_ok(runner, ["evaluate", "--config", cfg, "--out", str(out)])
        report = json.loads((out / "evaluation_report.json").read_text())
        assert report["category_coverage"]["value"] == 1.0
        for row in report["cascade"]["counts"]:
            assert row["ks"] == 6

    def test_privacy(self, workspace, runner, tmp_path):
        cfg = write_config(
            tmp_path / "priv.json",
            {
                "schema": str(workspace / "run" / "schema.json"),
                "data": {
                    "real": str(workspace / "data" / "real_train.csv"),
                    "synthetic": str(workspace / "syn" / "synthetic.csv"),
                },
                "privacy": {"quasi_vars": ["a_high", "regime"]},
            },
        )
        out = tmp_path / "priv"
        run_ok(runner, ["privacy", "--config", cfg, "--out", str(out)])
        report = json.loads((out / "privacy_report.json").read_text())
        assert report["threshold"] == 0.09
        assert report["min_distance"] >= 0.0

    def test_utility(self, workspace, runner, tmp_path):
        cfg = write_config(
            tmp_path / "util.json",
            {
                "schema": str(workspace / "run" / "schema.json"),
                "data": {
                    "real": str(workspace / "data" / "real_train.csv"),
                    "synthetic": str(workspace / "syn" / "synthetic.csv"),
                },
                "utility": {
                    "observation_vars": ["signal_a", "signal_b"],
                    "action_vars": ["a_high", "regime"],
                    "reward": {"variable": "signal_a", "low": 0.4, "high": 0.6},
                    "n_states": 20,
                    "n_components": 2,
                },
            },
        )
        out = tmp_path / "util"
        run_ok(runner, ["utility", "--config", cfg, "--out", str(out), "--plots"])
        report = json.loads((out / "utility_report.json").read_text())
        assert 0.0 <= report["tv_divergence"] <= 1.0
        heatmap = pd.read_csv(out / "heatmap_real.csv", index_col=0)
        assert heatmap.to_numpy().sum() == pytest.approx(100.0, abs=0.01)
        assert (out / "policy_synthetic.json").exists()


class TestErrors:
    def test_missing_config_key_is_machine_readable(self, runner, tmp_path):
        cfg = write_config(tmp_path / "c.json", {})
        result = runner.invoke(main, ["train", "--config", cfg])
        assert result.exit_code != 0
        assert '"error"' in result.output

    def test_bad_csv_fails_cleanly(self, runner, tmp_path):
        from mixdiff.toydata import toy_schema

        toy_schema(8).to_json(tmp_path / "schema.json")
        (tmp_path / "bad.csv").write_text("not,a,valid,header\n1,2,3,4\n")
        cfg = write_config(
            tmp_path / "c.json",
            {
                "schema": str(tmp_path / "schema.json"),
                "data": {"real": str(tmp_path / "bad.csv"), "synthetic": str(tmp_path / "bad.csv")},
            },
        )
        result = runner.invoke(main, ["evaluate", "--config", cfg])
        assert result.exit_code != 0
        assert "error" in result.output


def test_sample_hypotension_layout_has_22_columns(tmp_path, runner=None):
    # a (untrained) checkpoint for the bundled schema is enough to exercise
    # the published CSV layout
    schema = load_fixture("hypotension")
    model = DenoisingUnet(
        DenoiserConfig(
            input_width=schema.encoded_width,
            seq_lengths=(48, 12, 3),
            latent_width=16,
            noise_embed_dim=8,
        ),
        seed=0,
    )
    save_checkpoint(model, tmp_path / "d.pt")
    schema_path = Path(__file__).resolve().parents[1] / "src/mixdiff/fixtures/hypotension.json"
    cfg = write_config(
        tmp_path / "c.json",
        {
            "schema": str(schema_path),
            "checkpoint": str(tmp_path / "d.pt"),
            "schedule": {"n_steps": 4},
            "sample": {"n_patients": 2},
        },
    )
    out = tmp_path / "out"
    run_ok(CliRunner(), ["sample", "--config", cfg, "--out", str(out)])
    header = (out / "synthetic.csv").read_text().splitlines()[0]
    assert len(header.split(",")) == 22
