import numpy as np
import pytest
import torch

from stageprune.exceptions import InvalidConfig, InvalidTimestep
from stageprune.fitness import energy_distance
from stageprune.toydiff import (
    DenoiserModel,
    ModelConfig,
    SamplerConfig,
    build_schedule,
    forward_noise,
    initial_latents,
    load_checkpoint,
    make_dataset,
    sample,
    save_checkpoint,
    train,
)
from stageprune.binio import file_sha256


class TestSchedule:
    def test_two_step_hand_values(self):
        s = build_schedule(2, 0.5, 0.5)
        np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25])
        np.testing.assert_allclose(s.snr, [1.0, 1 / 3])

    def test_default_schedule_ends_near_pure_noise(self, sched):
        assert sched.alpha_bar[-1] < 1e-4
        assert sched.snr[0] > sched.snr[-1]
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_alpha_bar_at_zero_is_one(self, sched):
        assert sched.alpha_bar_at(0) == 1.0

    @pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 0.1, 1.0)])
    def test_invalid_ranges(self, args):
        with pytest.raises(InvalidConfig):
            build_schedule(*args)

    def test_snr_rejects_t_zero(self, sched):
        with pytest.raises(InvalidTimestep):
            sched.snr_at(0)


class TestForwardNoise:
    def test_t_zero_returns_x0(self, sched, rng):
        x0 = rng.standard_normal((3, 16, 16))
        np.testing.assert_array_equal(forward_noise(x0, 0, rng.standard_normal(x0.shape), sched), x0)

    def test_zero_image_gives_scaled_noise(self, sched, rng):
        noise = rng.standard_normal((16, 16))
        out = forward_noise(np.zeros((16, 16)), 500, noise, sched)
        np.testing.assert_allclose(out, np.sqrt(1 - sched.alpha_bar[499]) * noise)

    def test_monte_carlo_moments(self, sched):
        rng = np.random.default_rng(0)
        t = 300
        x0 = np.full((200_000,), 0.7)
        out = forward_noise(x0, t, rng.standard_normal(x0.shape), sched)
        abar = sched.alpha_bar[t - 1]
        assert abs(out.mean() - np.sqrt(abar) * 0.7) < 5e-3
        assert abs(out.var() - (1 - abar)) < 5e-3

    def test_numpy_and_torch_agree(self, sched, rng):
        x0 = rng.standard_normal((4, 16, 16)).astype(np.float32)
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        t = np.array([1, 10, 500, 1000])
        a = forward_noise(x0, t, noise, sched)
        b = forward_noise(torch.from_numpy(x0), torch.from_numpy(t), torch.from_numpy(noise), sched)
        np.testing.assert_allclose(a, b.numpy(), rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("t", [-1, 1001])
    def test_out_of_range(self, sched, t):
        with pytest.raises(InvalidTimestep):
            forward_noise(np.zeros(4), t, np.zeros(4), sched)


class TestData:
    def test_shapes_values_and_balance(self):
        d = make_dataset(n=400, seed=3)
        assert d.images.shape == (400, 16, 16) and d.images.dtype == np.float32
        assert set(np.unique(d.images)) <= {-1.0, 1.0}
        assert np.bincount(d.labels).tolist() == [100] * 4

    def test_deterministic(self):
        a, b = make_dataset(n=50, seed=9), make_dataset(n=50, seed=9)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_empty_rejected(self):
        with pytest.raises(InvalidConfig):
            make_dataset(n=0)


class TestModel:
    def test_parameter_count_and_registry(self):
        m = DenoiserModel(ModelConfig())
        assert m.num_parameters() == ModelConfig().param_count()
        reg = m.layer_registry()
        assert len(reg) == 16
        assert reg["blocks.0.mlp.fc1"].shape == (64, 32)
        assert reg["blocks.3.mlp.fc2"].shape == (32, 64)
        assert reg["blocks.1.attn.qkv"].shape == (96, 32)

    def test_forward_shape_and_trace(self):
        m = DenoiserModel(ModelConfig())
        trace = {}
        out = m(torch.zeros(2, 16, 16), torch.tensor([5, 900]), torch.tensor([0, 3]), trace=trace)
        assert out.shape == (2, 16, 16)
        assert trace["blocks.2.mlp.fc2"].shape == (2, 16, 64)
        assert "block_in.0" in trace and "block_out.3" in trace

    def test_patchify_roundtrip(self, rng):
        m = DenoiserModel(ModelConfig())
        x = torch.from_numpy(rng.standard_normal((3, 16, 16)).astype(np.float32))
        assert torch.equal(m.unpatchify(m.patchify(x)), x)

    def test_seeded_init_does_not_disturb_global_rng(self):
        torch.manual_seed(7)
        expected = torch.rand(3)
        torch.manual_seed(7)
        DenoiserModel(ModelConfig(), seed=1)
        assert torch.equal(torch.rand(3), expected)


class TestTraining:
    def test_zero_epochs_is_identity(self, data, sched):
        m = DenoiserModel(ModelConfig(), seed=2)
        out, losses = train(m, data, sched, epochs=0)
        assert losses == []
        for a, b in zip(m.state_dict().values(), out.state_dict().values()):
            assert torch.equal(a, b)

    def test_deterministic(self, sched):
        d = make_dataset(n=128, seed=1)
        a, la = train(DenoiserModel(seed=0), d, sched, epochs=2, seed=4)
        b, lb = train(DenoiserModel(seed=0), d, sched, epochs=2, seed=4)
        assert la == lb
        for x, y in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(x, y)

    def test_default_run_halves_loss(self, trained):
        _, losses = trained
        assert len(losses) == 30
        assert losses[-1] / losses[0] < 0.5


class TestSampler:
    def test_timesteps(self):
        ts = SamplerConfig().timesteps(1000)
        assert ts.tolist() == list(range(1000, 0, -50))

    def test_deterministic_and_clipped(self, model, sched):
        cfg = SamplerConfig(num_steps=10)
        a = sample(model, cfg, sched, [0, 1, 2])
        b = sample(model, cfg, sched, [0, 1, 2])
        assert np.array_equal(a, b)
        assert a.shape == (3, 16, 16) and a.min() >= -1 and a.max() <= 1

    def test_scalar_label_gives_single_image(self, model, sched):
        img = sample(model, SamplerConfig(num_steps=5), sched, 2)
        assert img.shape == (16, 16)

    def test_trained_samples_closer_to_data_than_noise(self, model, sched, data):
        labels = [i % 4 for i in range(64)]
        imgs = sample(model, SamplerConfig(), sched, labels, latents=initial_latents(3, 64))
        real = data.images[:256]
        noise = np.clip(np.random.default_rng(0).standard_normal((64, 16, 16)), -1, 1)
        assert energy_distance(imgs, real) < energy_distance(noise, real)


def test_checkpoint_roundtrip(tmp_path, model):
    p1 = save_checkpoint(model, tmp_path / "a.ckpt")
    p2 = save_checkpoint(model, tmp_path / "b.ckpt")
    assert file_sha256(p1) == file_sha256(p2)
    loaded = load_checkpoint(p1)
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
