import numpy as np
import pytest
import torch

from mixdiff.denoiser import DenoiserConfig, DenoisingUnet
from mixdiff.diffusion import build_schedule, one_step_reconstruct, q_sample
from mixdiff.toydata import generate_toy_table, toy_schema
from mixdiff.schema import encode
from mixdiff.training import (
    RandomProjection,
    TrainConfig,
    TrainingDiverged,
    draw_projection,
    noise_loss,
    recon_loss_1,
    recon_loss_2,
    train,
    write_loss_log,
)


@pytest.fixture(scope="module")
def small_batch():
    schema = toy_schema(8)
    table = generate_toy_table(32, 8, seed=4)
    return encode(table, schema)


def small_model(seed=0):
    cfg = DenoiserConfig(
        input_width=7, seq_lengths=(8, 4, 2), latent_width=16, noise_embed_dim=8
    )
    return DenoisingUnet(cfg, seed=seed)


def small_config(**overrides):
    base = dict(
        learning_rate=1e-3,
        batch_size=16,
        epochs=20,
        projection_widths=(16, 8),
        seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestLosses:
    def test_noise_loss_zero_on_match(self):
        x = np.random.default_rng(0).normal(size=(4, 1, 3, 2))
        assert noise_loss(x, x.copy()) == 0.0

    def test_noise_loss_unit_offset(self):
        zeros = np.zeros((4, 1, 3, 2))
        assert noise_loss(zeros, np.ones_like(zeros)) == 1.0

    def test_noise_loss_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 1, 4, 2)), rng.normal(size=(3, 1, 4, 2))
        total = 0.0
        for x, y in zip(a.ravel(), b.ravel()):
            total += (x - y) ** 2
        assert abs(noise_loss(a, b) - total / a.size) < 1e-12

    def test_recon1_unit_offset(self):
        x = np.random.default_rng(2).normal(size=(2, 1, 3, 2))
        assert recon_loss_1(x, x + 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_recon1_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 1, 5, 3)), rng.normal(size=(2, 1, 5, 3))
        oracle = float(np.mean([(x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())]))
        assert abs(recon_loss_1(a, b) - oracle) < 1e-12

    def test_recon2_zero_on_match(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 1, 2, 2))
        proj = draw_projection(rng, 4, (8, 4))
        assert recon_loss_2(x, x.copy(), proj) == 0.0

    def test_recon2_annihilating_projection(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(3, 1, 2, 2)), rng.normal(size=(3, 1, 2, 2))
        proj = RandomProjection(u1=np.eye(4), u2=np.zeros((4, 4)))
        assert recon_loss_2(x, y, proj) == 0.0

    def test_recon2_identity_matrices_reduce_to_relu_distance(self):
        # u1 = u2 = I collapses the map to relu, checked on a 2x2 case
        a = np.array([[1.0, -2.0]]).reshape(1, 1, 1, 2)
        b = np.array([[-0.5, 3.0]]).reshape(1, 1, 1, 2)
        proj = RandomProjection(u1=np.eye(2), u2=np.eye(2))
        expected = np.mean(
            (np.maximum(0, a.reshape(1, 2)) - np.maximum(0, b.reshape(1, 2))) ** 2
        )
        assert recon_loss_2(a, b, proj) == pytest.approx(expected, abs=1e-12)
        assert recon_loss_2(a, b, proj) == pytest.approx((1.0 + 9.0) / 2, abs=1e-12)

    def test_projection_scaling(self):
        rng = np.random.default_rng(6)
        proj = draw_projection(rng, 100, (128, 64))
        assert proj.u1.shape == (100, 128)
        assert proj.u2.shape == (128, 64)
        assert proj.u1.std() == pytest.approx(1 / np.sqrt(100), rel=0.1)


class TestTrainLoop:
    def test_zero_learning_rate_keeps_parameters(self, small_batch):
        model = small_model(seed=1)
        before = [p.detach().clone() for p in model.parameters()]
        train(small_batch, model, build_schedule(20), small_config(learning_rate=0.0))
        for a, b in zip(before, model.parameters()):
            assert torch.equal(a, b)

    def test_loss_weight_identity_exact(self, small_batch):
        model = small_model(seed=2)
        records = train(
            small_batch, model, build_schedule(20), small_config(epochs=10)
        )
        for r in records:
            assert r.total - (r.noise + 20.0 * r.recon1 + 10.0 * r.recon2) == 0.0

    def test_deterministic_replay(self, small_batch):
        runs = []
        for _ in range(2):
            model = small_model(seed=3)
            runs.append(
                train(small_batch, model, build_schedule(20), small_config(epochs=8))
            )
        assert [(r.noise, r.recon1, r.recon2) for r in runs[0]] == [
            (r.noise, r.recon1, r.recon2) for r in runs[1]
        ]

    def test_noise_loss_decreases(self, small_batch):
        model = small_model(seed=4)
        records = train(
            small_batch, model, build_schedule(20), small_config(epochs=300)
        )
        first = np.mean([r.noise for r in records[:30]])
        last = np.mean([r.noise for r in records[-30:]])
        assert last < first

    def test_descent_probe_single_step(self, small_batch):
        # one conservative Adam step on a fixed batch must not increase that
        # batch's total loss
        model = small_model(seed=6)
        schedule = build_schedule(20)
        gen = torch.Generator().manual_seed(0)
        x0 = torch.from_numpy(small_batch.data[:16].astype(np.float32))
        t = torch.randint(1, 21, (16,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        rng = np.random.default_rng(0)
        proj = draw_projection(rng, x0.shape[2] * x0.shape[3], (16, 8))

        def total_loss():
            xt = q_sample(x0, t, eps, schedule)
            eps_hat = model(xt, t)
            x0_hat = one_step_reconstruct(xt, t, eps_hat, schedule)
            return (
                noise_loss(eps, eps_hat)
                + 20.0 * recon_loss_1(x0, x0_hat)
                + 10.0 * recon_loss_2(x0, x0_hat, proj)
            )

        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        before = total_loss()
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = total_loss()
        assert after.item() <= before.item()

    def test_batch_size_larger_than_dataset_rejected(self, small_batch):
        with pytest.raises(ValueError, match="batch_size"):
            train(
                small_batch,
                small_model(),
                build_schedule(20),
                small_config(batch_size=1000),
            )

    def test_divergence_aborts_with_checkpoint(self, small_batch, tmp_path):
        model = small_model(seed=7)
        with torch.no_grad():
            model.in_proj.weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged):
            train(
                small_batch,
                model,
                build_schedule(20),
                small_config(epochs=3),
                checkpoint_dir=tmp_path,
            )
        assert (tmp_path / "denoiser_diverged.pt").exists()

    def test_checkpoint_cadence(self, small_batch, tmp_path):
        model = small_model(seed=8)
        train(
            small_batch,
            model,
            build_schedule(20),
            small_config(epochs=20),
            checkpoint_dir=tmp_path,
        )
        names = sorted(p.name for p in tmp_path.glob("*.pt"))
        assert "denoiser_final.pt" in names
        assert "denoiser_000020.pt" in names
        assert "denoiser_000002.pt" in names  # every 10% of 20 epochs

    def test_loss_log_round_trip(self, small_batch, tmp_path):
        model = small_model(seed=9)
        records = train(small_batch, model, build_schedule(20), small_config(epochs=5))
        write_loss_log(records, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss_noise,loss_recon1,loss_recon2,loss_total"
        assert len(lines) == 6
        assert float(lines[1].split(",")[4]) == records[0].total


class TestConfigValidation:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_weights=(1.0, -1.0, 1.0))

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
