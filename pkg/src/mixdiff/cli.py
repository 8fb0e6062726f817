"""Operator command line: toygen | train | sample | evaluate | privacy | utility.

All commands take a JSON config file; a few common fields can be
overridden by flags (flag > config > environment).  Data goes to files
under the output directory, logs go to stderr, and partial outputs are
written to a temp path and atomically renamed.  Each run archives its
resolved config so it can be replayed bit for bit.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import privacy as privacy_mod
from . import rl, structure
from .denoiser import DenoiserConfig, DenoisingUnet, default_seq_lengths, load_checkpoint
from .diffusion import build_schedule, sample_episodes
from .fidelity import kl_table, run_cascade
from .schema import DatasetSchema, decode, encode, load_csv, save_csv
from .toydata import generate_toy_table, toy_schema
from .training import TrainConfig, train, write_loss_log

log = logging.getLogger("mixdiff")

OUT_ROOT_ENV = "MIXDIFF_OUT_ROOT"


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_json(path: Path, doc) -> None:
    _atomic_write_text(path, json.dumps(doc, indent=2, default=float) + "\n")


def _atomic(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename the result into place."""
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _resolve_out(config: dict, out_flag: str | None, command: str) -> Path:
    if out_flag:
        out = Path(out_flag)
    elif config.get("out_dir"):
        out = Path(config["out_dir"])
    elif os.environ.get(OUT_ROOT_ENV):
        out = Path(os.environ[OUT_ROOT_ENV]) / command
    else:
        out = Path("mixdiff_out") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive(config: dict, out: Path, command: str, seed: int) -> None:
    doc = dict(config)
    doc.update({"command": command, "seed": seed, "out_dir": str(out)})
    _atomic_write_json(out / "run_config.json", doc)


def _seed(config: dict, seed_flag: int | None) -> int:
    if seed_flag is not None:
        return seed_flag
    return int(config.get("seed", 0))


def _need(config: dict, *keys):
    node = config
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            raise click.ClickException(
                json.dumps({"error": f"config is missing {'.'.join(keys)!r}"})
            )
        node = node[key]
    return node


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # surface a machine-readable error, nonzero exit
            raise click.ClickException(
                json.dumps({"error": str(exc), "type": type(exc).__name__})
            )

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings only.")
def main(verbose: bool, quiet: bool):
    """Train, sample and evaluate mixed-type longitudinal data synthesizers."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@_guard
def toygen(config_path, seed, out_flag):
    """Generate a seeded toy cohort: schema plus train/holdout CSVs."""
    config = _load_config(config_path)
    toy = config.get("toy", {})
    n_patients = int(toy.get("n_patients", 500))
    holdout = int(toy.get("holdout_patients", n_patients))
    length = int(toy.get("length", 16))
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "toygen")

    schema = toy_schema(length)
    children = np.random.SeedSequence(run_seed).spawn(2)
    train_tbl = generate_toy_table(
        n_patients, length, seed=int(children[0].generate_state(1)[0]), id_prefix="p"
    )
    holdout_tbl = generate_toy_table(
        holdout, length, seed=int(children[1].generate_state(1)[0]), id_prefix="h"
    )

    schema.to_json(out / "schema.json")
    _atomic(out / "real_train.csv", lambda p: save_csv(train_tbl, p, schema))
    _atomic(out / "real_holdout.csv", lambda p: save_csv(holdout_tbl, p, schema))
    _archive(config, out, "toygen", run_seed)
    log.info("wrote toy cohort (%d + %d patients) to %s", n_patients, holdout, out)


@main.command(name="train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@_guard
def train_cmd(config_path, seed, out_flag):
    """Train the denoiser on a real CSV; writes checkpoints and a loss log."""
    config = _load_config(config_path)
    schema = DatasetSchema.from_json(_need(config, "schema"))
    table = load_csv(_need(config, "data", "train"), schema)
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "train")

    schema = schema.with_ranges_from(table)
    batch = encode(table, schema)

    dn = config.get("denoiser", {})
    dconfig = DenoiserConfig(
        input_width=schema.encoded_width,
        seq_lengths=tuple(dn.get("seq_lengths") or default_seq_lengths(schema.max_length)),
        latent_width=int(dn.get("latent_width", 64)),
        noise_embed_dim=int(dn.get("noise_embed_dim", 100)),
    )
    sched_cfg = config.get("schedule", {})
    schedule = build_schedule(
        int(sched_cfg.get("n_steps", 200)),
        float(sched_cfg.get("beta_min", 1e-4)),
        float(sched_cfg.get("beta_max", 0.01)),
    )
    tr = config.get("train", {})
    children = np.random.SeedSequence(run_seed).spawn(2)
    model = DenoisingUnet(dconfig, seed=int(children[0].generate_state(1)[0]))
    tconfig = TrainConfig(
        learning_rate=float(tr.get("learning_rate", 1e-3)),
        batch_size=min(int(tr.get("batch_size", 128)), batch.n_episodes),
        epochs=int(tr.get("epochs", 3000)),
        loss_weights=tuple(tr.get("loss_weights", (1.0, 20.0, 10.0))),
        projection_widths=tuple(tr.get("projection_widths", (128, 64))),
        seed=int(children[1].generate_state(1)[0]),
    )

    every = max(1, tconfig.epochs // 10)

    def progress(rec):
        if rec.iteration % every == 0 or rec.iteration == 1:
            log.info(
                "iteration %d/%d: total %.4f (noise %.4f)",
                rec.iteration, tconfig.epochs, rec.total, rec.noise,
            )

    records = train(
        batch, model, schedule, tconfig, checkpoint_dir=out / "checkpoints", progress=progress
    )
    schema.to_json(out / "schema.json")
    _atomic(out / "loss_log.csv", lambda p: write_loss_log(records, p))
    _archive(config, out, "train", run_seed)
    log.info("final loss %.4f; checkpoints in %s", records[-1].total, out / "checkpoints")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@_guard
def sample(config_path, seed, out_flag):
    """Sample a synthetic CSV (values, then patient id, then time index)."""
    config = _load_config(config_path)
    schema = DatasetSchema.from_json(_need(config, "schema"))
    model = load_checkpoint(_need(config, "checkpoint"))
    n_patients = int(_need(config, "sample", "n_patients"))
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "sample")

    batch = sample_episodes(
        model.as_denoiser(), _schedule_from(config), schema, n_patients, seed=run_seed
    )
    table = decode(batch)
    width = len(str(max(n_patients - 1, 1)))
    mapping = {old: f"s{int(old):0{width}d}" for old in table["patient_id"].unique()}
    table["patient_id"] = table["patient_id"].map(mapping)
    _atomic(out / "synthetic.csv", lambda p: save_csv(table, p, schema))
    _archive(config, out, "sample", run_seed)
    log.info("wrote %d synthetic patients to %s", n_patients, out / "synthetic.csv")


def _schedule_from(config: dict):
    sched_cfg = config.get("schedule", {})
    return build_schedule(
        int(sched_cfg.get("n_steps", 200)),
        float(sched_cfg.get("beta_min", 1e-4)),
        float(sched_cfg.get("beta_max", 0.01)),
    )


def _load_pair(config: dict):
    schema = DatasetSchema.from_json(_need(config, "schema"))
    real = load_csv(_need(config, "data", "real"), schema)
    syn = load_csv(_need(config, "data", "synthetic"), schema)
    return schema, real, syn


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@click.option("--plots", is_flag=True, help="Render PNGs from the CSV artifacts.")
@_guard
def evaluate(config_path, seed, out_flag, plots):
    """Realism, correlation and diversity metrics for a real/synthetic pair."""
    config = _load_config(config_path)
    schema, real, syn = _load_pair(config)
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "evaluate")
    ev = config.get("evaluate", {})

    cascade = run_cascade(
        real,
        syn,
        schema,
        alpha=float(ev.get("alpha", 0.05)),
        repetitions=int(ev.get("repetitions", 100)),
        batch_size=int(ev.get("batch_size", 32)),
        seed=run_seed,
    )
    _atomic(out / "cascade.csv", cascade.to_csv)

    kl = kl_table(real, syn, schema, bins=int(ev.get("kl_bins", 20)))
    _atomic(out / "kl.csv", lambda p: kl.to_csv(p, index=False))

    for label, table in (("real", real), ("synthetic", syn)):
        bundle = structure.correlation_bundle(table, schema)
        for kind in ("static", "trend", "cycle"):
            _atomic(
                out / f"correlation_{kind}_{label}.csv",
                functools.partial(getattr(bundle, kind).to_csv),
            )

    cluster_cfg = ev.get("cluster", {})
    ucluster = structure.log_cluster_u(
        real,
        syn,
        schema,
        n_clusters=int(cluster_cfg.get("n_clusters", 20)),
        repetitions=int(cluster_cfg.get("repetitions", 20)),
        sample_n=int(cluster_cfg.get("sample_n", 100_000)),
        seed=run_seed,
    )
    coverage = structure.category_coverage(real, syn, schema)

    report = {
        "cascade": {
            "alpha": cascade.alpha,
            "repetitions": cascade.repetitions,
            "batch_size": cascade.batch_size,
            "counts": cascade.counts.to_dict(orient="records"),
        },
        "kl_divergence": kl.to_dict(orient="records"),
        "log_cluster": {
            "value": ucluster.value,
            "per_repetition": ucluster.per_repetition,
            "sample_n": ucluster.sample_n,
            "n_clusters": ucluster.n_clusters,
        },
        "category_coverage": None
        if coverage is None
        else {"value": coverage.value, "per_variable": coverage.per_variable},
    }
    _atomic_write_json(out / "evaluation_report.json", report)
    _archive(config, out, "evaluate", run_seed)
    if plots:
        _emit_evaluate_plots(out)
    log.info("evaluation report in %s", out)


@main.command(name="privacy")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@_guard
def privacy_cmd(config_path, seed, out_flag):
    """Minimum leakage distance plus the quasi-identifier linkage risk."""
    config = _load_config(config_path)
    schema, real, syn = _load_pair(config)
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "privacy")
    pv = config.get("privacy", {})

    distance = privacy_mod.min_euclidean_distance(real, syn, schema)
    quasi_vars = pv.get("quasi_vars", [])
    if quasi_vars:
        widths = pv.get("numeric_bins", {})
        binning = {
            name: (lambda w: (lambda v: int(np.floor(float(v) / w))))(float(w))
            for name, w in widths.items()
        }
        report = privacy_mod.disclosure_risk(
            real, syn, schema, quasi_vars, numeric_binning=binning, min_distance=distance
        ).to_dict()
        report["quasi_vars"] = quasi_vars
    else:
        report = {"risk": None, "min_distance": distance,
                  "note": "no quasi-identifiers configured; distance test only"}
    _atomic_write_json(out / "privacy_report.json", report)
    _archive(config, out, "privacy", run_seed)
    log.info("privacy report in %s (min distance %.4f)", out, distance)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_flag", type=click.Path(), default=None)
@click.option("--plots", is_flag=True, help="Render PNGs from the CSV artifacts.")
@_guard
def utility(config_path, seed, out_flag, plots):
    """Train offline policies on both datasets and compare their action patterns."""
    config = _load_config(config_path)
    schema, real, syn = _load_pair(config)
    run_seed = _seed(config, seed)
    out = _resolve_out(config, out_flag, "utility")
    ut = config.get("utility", {})

    observation_vars = _need(config, "utility", "observation_vars")
    action_vars = _need(config, "utility", "action_vars")
    reward_cfg = _need(config, "utility", "reward")
    reward = rl.band_reward(
        reward_cfg["variable"], float(reward_cfg["low"]), float(reward_cfg["high"])
    )
    axes = ut.get("heatmap_axes", action_vars[:2])

    policies = {}
    for label, table in (("real", real), ("synthetic", syn)):
        mdp = rl.build_mdp(
            table,
            schema,
            observation_vars,
            action_vars,
            reward,
            n_states=int(ut.get("n_states", 100)),
            n_components=int(ut.get("n_components", 5)),
            seed=run_seed,
        )
        policy = rl.bcq_train(
            mdp,
            gamma=float(ut.get("gamma", 0.99)),
            alpha=float(ut.get("alpha", 0.01)),
            iterations=int(ut.get("iterations", 100)),
            tau_b=float(ut.get("tau_b", 0.3)),
        )
        policies[label] = policy
        _atomic_write_json(out / f"policy_{label}.json", policy.to_dict())
        heatmap = rl.action_heatmap(policy, axes)
        _atomic(out / f"heatmap_{label}.csv", heatmap.to_csv)

    tv = rl.compare_policies(policies["real"], policies["synthetic"])
    _atomic_write_json(
        out / "utility_report.json",
        {"tv_divergence": tv, "heatmap_axes": list(axes), "action_vars": list(action_vars)},
    )
    _archive(config, out, "utility", run_seed)
    if plots:
        _emit_utility_plots(out)
    log.info("utility report in %s (TV divergence %.4f)", out, tv)


def _emit_evaluate_plots(out: Path) -> None:
    """Heat-map images for the correlation CSVs; derived from files only."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    for csv in sorted(out.glob("correlation_*.csv")):
        frame = pd.read_csv(csv, index_col=0)
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(frame.to_numpy(float), vmin=-1, vmax=1, cmap="coolwarm")
        ax.set_xticks(range(len(frame.columns)), frame.columns, rotation=90, fontsize=7)
        ax.set_yticks(range(len(frame.index)), frame.index, fontsize=7)
        fig.colorbar(im)
        ax.set_title(csv.stem.replace("_", " "))
        fig.tight_layout()
        fig.savefig(plot_dir / f"{csv.stem}.png", dpi=120)
        plt.close(fig)
    log.info("correlation plots in %s", plot_dir)


def _emit_utility_plots(out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    for csv in sorted(out.glob("heatmap_*.csv")):
        frame = pd.read_csv(csv, index_col=0)
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(frame.to_numpy(float), cmap="viridis")
        ax.set_xticks(range(len(frame.columns)), frame.columns, rotation=45, fontsize=8)
        ax.set_yticks(range(len(frame.index)), frame.index, fontsize=8)
        for (i, j), val in np.ndenumerate(frame.to_numpy(float)):
            ax.text(j, i, f"{val:.1f}%", ha="center", va="center", fontsize=8, color="w")
        fig.colorbar(im)
        ax.set_title(csv.stem.replace("_", " "))
        fig.tight_layout()
        fig.savefig(plot_dir / f"{csv.stem}.png", dpi=120)
        plt.close(fig)
    log.info("policy heatmap plots in %s", plot_dir)


if __name__ == "__main__":
    main()
