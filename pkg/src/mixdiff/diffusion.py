"""Variance schedules, closed-form forward corruption, and reverse sampling.

The array operations are backend-agnostic: they accept numpy arrays or
torch tensors and preserve the input's dtype, so the same functions serve
the (differentiable) training path and the numpy sampling/oracle paths.
Steps ``t`` are 1-based, ``1 <= t <= n_steps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schema import DatasetSchema, EpisodeBatch, infer_lengths


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise strengths and the derived cumulative signal fractions."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))
        object.__setattr__(self, "sigmas", np.sqrt(betas))

    @property
    def n_steps(self) -> int:
        return int(self.betas.size)

    def _check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.n_steps):
            raise ValueError(f"step t={t} outside [1, {self.n_steps}]")
        return t

    def beta(self, t):
        return self.betas[self._check_step(t) - 1]

    def alpha(self, t):
        return self.alphas[self._check_step(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[self._check_step(t) - 1]

    def alpha_bar_prev(self, t):
        """Cumulative signal fraction one step earlier, with the t=1 value 1."""
        t = self._check_step(t)
        return np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def sigma(self, t):
        return self.sigmas[self._check_step(t) - 1]


@dataclass(frozen=True)
class PosteriorParams:
    """Coefficients of the exact denoising posterior mean plus its variance."""

    coef_x0: float
    coef_xt: float
    variance: float


def build_schedule(n_steps: int, beta_min: float = 1e-4, beta_max: float = 0.01) -> NoiseSchedule:
    """Linearly spaced betas from beta_min at t=1 to beta_max at t=n_steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if n_steps == 1:
        return NoiseSchedule(np.array([beta_min], dtype=np.float64))
    return NoiseSchedule(np.linspace(beta_min, beta_max, n_steps, dtype=np.float64))


def _like(values, ref):
    """Cast schedule coefficients to the backend/dtype of ``ref``.

    Scalar t gives a 0-d coefficient; vector t (one step per batch element)
    gives a (B, 1, 1, ...) coefficient broadcastable against ref.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim > 0:
        values = values.reshape((-1,) + (1,) * (ref.ndim - 1))
    if isinstance(ref, np.ndarray):
        return values.astype(ref.dtype)
    import torch

    return torch.as_tensor(values, dtype=ref.dtype, device=ref.device)


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Corrupt clean data to step t in closed form: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    abar = schedule.alpha_bar(t)
    return _like(np.sqrt(abar), x0) * x0 + _like(np.sqrt(1.0 - abar), x0) * eps


def posterior_params(t: int, schedule: NoiseSchedule) -> PosteriorParams:
    """Exact posterior mean coefficients (for x0 and xt) and variance at step t.

    Used for cross-checking; t=1 degenerates to variance 0 with all the
    mean weight on x0.
    """
    beta = float(schedule.beta(t))
    abar = float(schedule.alpha_bar(t))
    abar_prev = float(schedule.alpha_bar_prev(t))
    alpha = float(schedule.alpha(t))
    return PosteriorParams(
        coef_x0=np.sqrt(abar_prev) * beta / (1.0 - abar),
        coef_xt=np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar),
        variance=beta * (1.0 - abar_prev) / (1.0 - abar),
    )


def one_step_reconstruct(xt, t, eps_hat, schedule: NoiseSchedule):
    """Invert the closed-form corruption using predicted noise: (xt - sqrt(1-abar)*eps)/sqrt(abar)."""
    abar = schedule.alpha_bar(t)
    if np.any(abar <= 0.0):
        raise ValueError("cumulative signal fraction vanished; cannot reconstruct")
    return (xt - _like(np.sqrt(1.0 - abar), xt) * eps_hat) / _like(np.sqrt(abar), xt)


def reverse_step(xt, t, eps_hat, z, schedule: NoiseSchedule):
    """One denoising step: (xt - beta/sqrt(1-abar)*eps_hat)/sqrt(alpha) + sigma*z.

    The caller must pass z = 0 at t = 1 (the final step adds no noise).
    """
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    alpha = schedule.alpha(t)
    mean = (xt - _like(beta / np.sqrt(1.0 - abar), xt) * eps_hat) / _like(np.sqrt(alpha), xt)
    return mean + _like(schedule.sigma(t), xt) * z


def sample_episodes(
    denoiser,
    schedule: NoiseSchedule,
    schema: DatasetSchema,
    n_episodes: int,
    seed: int | np.random.Generator = 0,
) -> EpisodeBatch:
    """Draw synthetic episodes by iterating the reverse process from pure noise.

    ``denoiser`` maps (float32 array of shape (B, 1, L, N), step t) to a
    same-shape noise estimate.  Fully deterministic given the seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (n_episodes, 1, schema.max_length, schema.encoded_width)
    x = rng.standard_normal(shape, dtype=np.float32)
    for t in range(schedule.n_steps, 0, -1):
        eps_hat = np.asarray(denoiser(x, t), dtype=np.float32)
        if eps_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {x.shape}")
        z = (
            rng.standard_normal(shape, dtype=np.float32)
            if t > 1
            else np.zeros(shape, dtype=np.float32)
        )
        x = reverse_step(x, t, eps_hat, z, schedule)
    lengths = infer_lengths(x, schema)
    return EpisodeBatch(data=x, lengths=lengths, schema=schema)
