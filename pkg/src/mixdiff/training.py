"""Training loop: noise corruption, the three losses, and Adam updates.

Per iteration a batch of episodes is drawn, each element gets its own
uniformly drawn noise level, and the total loss combines the noise-
prediction error with two one-step-reconstruction penalties (plain, and
through a freshly drawn random projection) at the configured weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import DenoisingUnet, find_nonfinite_layer, save_checkpoint
from .diffusion import NoiseSchedule, one_step_reconstruct, q_sample
from .schema import EpisodeBatch


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; a diagnostic checkpoint may have been written."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 5000  # one gradient step on one sampled batch per epoch
    loss_weights: tuple[float, float, float] = (1.0, 20.0, 10.0)
    projection_widths: tuple[int, int] = (128, 64)
    seed: int = 0
    checkpoint_fraction: float = 0.1

    def __post_init__(self):
        if any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss weights must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class LossRecord:
    """Scalar losses of one iteration; total is exactly the weighted sum."""

    iteration: int
    noise: float
    recon1: float
    recon2: float
    total: float


@dataclass(frozen=True)
class RandomProjection:
    """Two untrained random matrices; maps v to relu(v @ u1) @ u2."""

    u1: np.ndarray
    u2: np.ndarray

    def apply(self, v):
        h = v @ _same_backend(self.u1, v)
        h = h * (h > 0)
        return h @ _same_backend(self.u2, v)


def _same_backend(mat: np.ndarray, ref):
    if isinstance(ref, np.ndarray):
        return mat.astype(ref.dtype)
    return torch.as_tensor(mat, dtype=ref.dtype, device=ref.device)


def draw_projection(
    rng: np.random.Generator, in_dim: int, widths: tuple[int, int]
) -> RandomProjection:
    """Fresh standard-normal matrices scaled by 1/sqrt(fan-in)."""
    w1, w2 = widths
    u1 = rng.standard_normal((in_dim, w1)) / np.sqrt(in_dim)
    u2 = rng.standard_normal((w1, w2)) / np.sqrt(w1)
    return RandomProjection(u1=u1, u2=u2)


def noise_loss(eps, eps_hat):
    """Mean squared error over all elements."""
    d = eps - eps_hat
    return (d * d).mean()


def recon_loss_1(x0, x0_hat):
    """Mean-reduced squared distance between clean data and its reconstruction."""
    d = x0 - x0_hat
    return (d * d).mean()


def recon_loss_2(x0, x0_hat, projection: RandomProjection):
    """Squared distance after projecting both operands with the shared random map."""
    a = projection.apply(x0.reshape(x0.shape[0], -1))
    b = projection.apply(x0_hat.reshape(x0_hat.shape[0], -1))
    d = a - b
    return (d * d).mean()


def write_loss_log(records: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_noise", "loss_recon1", "loss_recon2", "loss_total"])
        for r in records:
            w.writerow([r.iteration, repr(r.noise), repr(r.recon1), repr(r.recon2), repr(r.total)])


def train(
    batch: EpisodeBatch,
    model: DenoisingUnet,
    schedule: NoiseSchedule,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[LossRecord], None] | None = None,
) -> list[LossRecord]:
    """Run the full training loop, mutating ``model`` in place.

    Deterministic given (config.seed, data, model init).  Checkpoints are
    written every ``checkpoint_fraction`` of the epochs plus a final one
    when ``checkpoint_dir`` is set.  Raises TrainingDiverged on a
    non-finite loss, after writing a diagnostic checkpoint.
    """
    n = batch.n_episodes
    if config.batch_size > n:
        raise ValueError(
            f"batch_size {config.batch_size} exceeds dataset size {n}; "
            "shrink the batch or enlarge the data"
        )
    x_all = torch.from_numpy(np.ascontiguousarray(batch.data, dtype=np.float32))
    flat_dim = x_all.shape[2] * x_all.shape[3]

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    gen = torch.Generator().manual_seed(int(seeds[0].generate_state(1)[0]))
    proj_rng = np.random.default_rng(seeds[1])

    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    w_noise, w_r1, w_r2 = (float(w) for w in config.loss_weights)

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    every = max(1, int(round(config.epochs * config.checkpoint_fraction)))

    records: list[LossRecord] = []
    for it in range(1, config.epochs + 1):
        idx = torch.randperm(n, generator=gen)[: config.batch_size]
        x0 = x_all[idx]
        t = torch.randint(1, schedule.n_steps + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)

        xt = q_sample(x0, t, eps, schedule)
        eps_hat = model(xt, t)
        x0_hat = one_step_reconstruct(xt, t, eps_hat, schedule)
        projection = draw_projection(proj_rng, flat_dim, config.projection_widths)

        l_noise = noise_loss(eps, eps_hat)
        l_r1 = recon_loss_1(x0, x0_hat)
        l_r2 = recon_loss_2(x0, x0_hat, projection)
        l_tot = w_noise * l_noise + w_r1 * l_r1 + w_r2 * l_r2

        if not torch.isfinite(l_tot):
            if checkpoint_dir is not None:
                save_checkpoint(model, checkpoint_dir / "denoiser_diverged.pt")
            layer = find_nonfinite_layer(model, xt, t)
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}"
                + (f" (first non-finite layer: {layer})" if layer else "")
            )

        opt.zero_grad()
        l_tot.backward()
        opt.step()

        vals = (l_noise.detach().item(), l_r1.detach().item(), l_r2.detach().item())
        record = LossRecord(
            iteration=it,
            noise=vals[0],
            recon1=vals[1],
            recon2=vals[2],
            total=w_noise * vals[0] + w_r1 * vals[1] + w_r2 * vals[2],
        )
        records.append(record)
        if progress is not None:
            progress(record)

        if checkpoint_dir is not None and (it % every == 0 or it == config.epochs):
            save_checkpoint(model, checkpoint_dir / f"denoiser_{it:06d}.pt")

    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir / "denoiser_final.pt")
    return records
