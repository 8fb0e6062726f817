"""scikit-learn style estimator wrapping the full train/sample pipeline."""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .denoiser import DenoiserConfig, DenoisingUnet, default_seq_lengths
from .diffusion import build_schedule, sample_episodes
from .schema import DatasetSchema, decode, encode
from .training import TrainConfig, train


def _component_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed).spawn(index + 1)[index].generate_state(1)[0])


class DiffusionSynthesizer(BaseEstimator):
    """Trains a denoising diffusion model on a record table and samples new ones.

    Follows the scikit-learn estimator conventions: constructor arguments
    are stored verbatim (so get_params/set_params and cloning work) and
    all fitted state lands in trailing-underscore attributes.

    Parameters
    ----------
    schema : DatasetSchema
        Variable declarations.  Numeric ranges missing from the schema
        are learned from the training table and frozen.
    n_steps, beta_min, beta_max : diffusion schedule.
    latent_width, seq_lengths, noise_embed_dim : denoiser shape;
        ``seq_lengths`` defaults to a (L, ~L/4, ~L/16) ladder.
    learning_rate, batch_size, epochs, loss_weights, projection_widths :
        training loop; one epoch is one gradient step on one sampled batch.
    seed : master seed; model init, training and sampling draw from
        independent derived streams.
    """

    def __init__(
        self,
        schema: DatasetSchema = None,
        *,
        n_steps: int = 200,
        beta_min: float = 1e-4,
        beta_max: float = 0.01,
        latent_width: int = 64,
        seq_lengths: tuple[int, int, int] | None = None,
        noise_embed_dim: int = 100,
        learning_rate: float = 1e-3,
        batch_size: int = 128,
        epochs: int = 3000,
        loss_weights: tuple[float, float, float] = (1.0, 20.0, 10.0),
        projection_widths: tuple[int, int] = (128, 64),
        seed: int = 0,
    ):
        self.schema = schema
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.latent_width = latent_width
        self.seq_lengths = seq_lengths
        self.noise_embed_dim = noise_embed_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.loss_weights = loss_weights
        self.projection_widths = projection_widths
        self.seed = seed

    def fit(self, X: pd.DataFrame, y=None):
        if self.schema is None:
            raise ValueError("a DatasetSchema is required")
        self.schema_ = self.schema.with_ranges_from(X)
        batch = encode(X, self.schema_)

        self.denoiser_config_ = DenoiserConfig(
            input_width=self.schema_.encoded_width,
            seq_lengths=self.seq_lengths or default_seq_lengths(self.schema_.max_length),
            latent_width=self.latent_width,
            noise_embed_dim=self.noise_embed_dim,
        )
        self.model_ = DenoisingUnet(self.denoiser_config_, seed=_component_seed(self.seed, 0))
        self.schedule_ = build_schedule(self.n_steps, self.beta_min, self.beta_max)
        config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=min(self.batch_size, batch.n_episodes),
            epochs=self.epochs,
            loss_weights=self.loss_weights,
            projection_widths=self.projection_widths,
            seed=_component_seed(self.seed, 1),
        )
        self.loss_log_ = train(batch, self.model_, self.schedule_, config)
        return self

    def sample(self, n_episodes: int, seed: int | None = None) -> pd.DataFrame:
        """Draw a synthetic record table; deterministic given the seed."""
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the synthesizer before sampling")
        batch = sample_episodes(
            self.model_.as_denoiser(),
            self.schedule_,
            self.schema_,
            n_episodes,
            seed=self.seed if seed is None else seed,
        )
        return decode(batch)
