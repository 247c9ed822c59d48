"""Tests for denoiser backends, training and the DDIM step."""

import math
import statistics

import pytest
import torch
from dataset_loader import generate_synthetic, stack_model_space
from denoiser import (
    CompactDenoiser,
    DenoiserModel,
    RadicandError,
    TrainConfig,
    TrainingDivergedError,
    _direction_coefficient,
    build_denoiser,
    ddim_step,
    ddim_step_closed_form,
    estimate_x0_prior,
    train,
    training_loss,
    x0_from_eps,
)
from noise_schedule import NoiseSchedule, Rng, build_schedule, sigma_t
from unet import UNetDenoiser


class NanDenoiser(DenoiserModel):
    def __init__(self) -> None:
        super().__init__()
        self.weight = torch.nn.Parameter(torch.ones(()))

    def predict_noise(self, x_t, t):
        return self.weight * x_t * float("nan")


class TestDdimStep:
    def test_two_forms_agree(self, schedule):
        x_t = Rng(0).normal((2, 3, 8, 8), dtype=torch.float64)
        eps = Rng(1).normal((2, 3, 8, 8), dtype=torch.float64)
        noise = Rng(2).normal((2, 3, 8, 8), dtype=torch.float64)
        staged = ddim_step(x_t, 200, 180, eps, schedule, noise=noise)
        closed = ddim_step_closed_form(x_t, 200, 180, eps, schedule, noise=noise)
        assert torch.allclose(staged, closed, atol=1e-10)

    def test_final_step_returns_x0_estimate(self, schedule):
        x_t = Rng(0).normal((3, 4, 4), dtype=torch.float64)
        eps = Rng(1).normal((3, 4, 4), dtype=torch.float64)
        result = ddim_step(x_t, 20, 0, eps, schedule, rng=Rng(5))
        assert torch.allclose(result, x0_from_eps(x_t, eps, schedule.alpha_bar(20)), atol=1e-12)

    def test_consumes_rng_noise(self, schedule):
        x_t = torch.zeros(1, 4, 4)
        eps = torch.zeros(1, 4, 4)
        first = ddim_step(x_t, 200, 180, eps, schedule, rng=Rng(3))
        second = ddim_step(x_t, 200, 180, eps, schedule, rng=Rng(3))
        assert torch.equal(first, second)
        assert first.abs().sum() > 0

    def test_stochastic_step_needs_noise(self, schedule):
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1, 2, 2), 200, 180, torch.zeros(1, 2, 2), schedule)

    @pytest.mark.parametrize("s,t", [(5, 5), (10, 5), (-1, 5)])
    def test_rejects_bad_pair(self, schedule, s, t):
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1, 2, 2), t, s, torch.zeros(1, 2, 2), schedule, rng=Rng(0))

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1, 2, 2), 200, 180, torch.zeros(1, 2, 3), schedule, rng=Rng(0))

    def test_negative_radicand_raises(self):
        with pytest.raises(RadicandError):
            _direction_coefficient(0.5, 0.8)

    def test_rounding_radicand_is_clamped(self):
        assert _direction_coefficient(0.5, math.sqrt(0.5) + 1e-15) == 0.0

    def test_scalar_hand_evaluation(self):
        # ᾱ_1 = 0.9, ᾱ_2 = 0.9 * 5/9 = 0.5
        two_step = NoiseSchedule.from_betas([0.1, 4.0 / 9.0])
        x_t = torch.ones(1, 1, 1, dtype=torch.float64)
        eps = torch.full((1, 1, 1), 0.2, dtype=torch.float64)
        x_s = ddim_step(x_t, 2, 1, eps, two_step, noise=torch.zeros_like(x_t))
        assert sigma_t(two_step, 1, 2) == pytest.approx(0.2981, abs=1e-4)
        assert float(x_s) == pytest.approx(1.1731, abs=2e-4)


def test_estimate_x0_prior_matches_formula(scaled_denoiser, schedule):
    x_t = torch.full((1, 2, 2), 0.3)
    alpha_bar = schedule.alpha_bar(50)
    expected = (x_t - math.sqrt(1 - alpha_bar) * 0.5 * x_t) / math.sqrt(alpha_bar)
    with torch.no_grad():
        result = estimate_x0_prior(x_t, 50, scaled_denoiser, schedule)
    assert torch.allclose(result, expected, atol=1e-6)


class TestBackends:
    def test_compact_preserves_shape(self):
        model = CompactDenoiser(hidden_channels=8, embedding_dim=16)
        assert model(torch.zeros(3, 16, 16), 10).shape == (3, 16, 16)
        assert model(torch.zeros(2, 3, 16, 16), torch.tensor([5, 6])).shape == (2, 3, 16, 16)

    def test_compact_descriptor_rebuilds(self):
        model = CompactDenoiser(hidden_channels=8, embedding_dim=16, dilations=(1, 2))
        rebuilt = build_denoiser(model.descriptor())
        assert isinstance(rebuilt, CompactDenoiser)
        assert rebuilt.descriptor() == model.descriptor()

    def test_compact_rejects_too_many_dilations(self):
        with pytest.raises(ValueError):
            CompactDenoiser(dilations=(1, 2, 4, 8))

    def test_unet_preserves_shape(self):
        model = UNetDenoiser(
            model_channels=8,
            channel_mult=(1, 2),
            num_res_blocks=1,
            attention_resolutions=(2,),
            num_heads=2,
        )
        assert model(torch.zeros(2, 3, 8, 8), 100).shape == (2, 3, 8, 8)
        assert build_denoiser(model.descriptor()).descriptor() == model.descriptor()

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            build_denoiser({"backend": "transformer"})

    @pytest.mark.parametrize(
        "model",
        [
            CompactDenoiser(hidden_channels=8, embedding_dim=16),
            UNetDenoiser(
                model_channels=8,
                channel_mult=(1, 2),
                num_res_blocks=1,
                attention_resolutions=(2,),
                num_heads=2,
            ),
        ],
        ids=["compact", "unet"],
    )
    def test_batched_matches_one_at_a_time(self, model):
        model = model.double().eval()
        x_t = Rng(8).normal((4, 3, 16, 16), dtype=torch.float64)
        steps = torch.tensor([1, 250, 500, 999])
        with torch.no_grad():
            batched = model(x_t, steps)
            single = torch.stack([model(x_t[i], int(steps[i])) for i in range(4)])
        assert torch.allclose(batched, single, rtol=0, atol=1e-12)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": -1},
            {"batch_size": 0},
            {"learning_rate": -1.0},
            {"grad_clip": 0.0},
            {"checkpoint_every": -2},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_defaults_follow_reference_recipe(self):
        config = TrainConfig()
        assert (config.epochs, config.batch_size, config.learning_rate, config.weight_decay) == (
            2000,
            8,
            1e-4,
            5e-2,
        )


class TestTrain:
    def _images(self, n=4):
        generator = torch.Generator().manual_seed(0)
        return torch.rand(n, 3, 8, 8, generator=generator) * 2 - 1

    def test_zero_epochs_returns_untrained_model(self, short_schedule):
        model = CompactDenoiser(hidden_channels=8, embedding_dim=16)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        config = TrainConfig(epochs=0, t_max=100)
        result = train(model, self._images(), config, Rng(0), short_schedule)
        assert result.history == []
        assert all(torch.equal(before[k], v) for k, v in result.model.state_dict().items())

    def test_records_one_loss_per_epoch(self, short_schedule):
        model = CompactDenoiser(hidden_channels=8, embedding_dim=16)
        seen = []
        config = TrainConfig(epochs=3, batch_size=2, learning_rate=1e-3, t_max=100)
        result = train(
            model, self._images(), config, Rng(0), short_schedule, on_epoch=lambda e, l: seen.append(e)
        )
        assert len(result.history) == 3
        assert all(math.isfinite(v) for v in result.history)
        assert seen == [1, 2, 3]
        assert result.steps == 6
        assert not result.model.training

    def test_same_seed_same_weights(self, short_schedule):
        config = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, t_max=100)
        states = []
        for _ in range(2):
            torch.manual_seed(0)
            model = CompactDenoiser(hidden_channels=8, embedding_dim=16)
            train(model, self._images(), config, Rng(4), short_schedule)
            states.append(model.state_dict())
        assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])

    def test_empty_dataset(self, short_schedule):
        with pytest.raises(ValueError):
            train(
                CompactDenoiser(hidden_channels=8, embedding_dim=16),
                torch.zeros(0, 3, 8, 8),
                TrainConfig(epochs=1, t_max=100),
                Rng(0),
                short_schedule,
            )

    def test_schedule_mismatch(self):
        with pytest.raises(ValueError):
            train(
                CompactDenoiser(hidden_channels=8, embedding_dim=16),
                self._images(),
                TrainConfig(epochs=1, t_max=1000),
                Rng(0),
                build_schedule(t_max=50),
            )

    def test_diverging_loss_raises(self, short_schedule):
        config = TrainConfig(epochs=1, batch_size=2, t_max=100)
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(NanDenoiser(), self._images(6), config, Rng(0), short_schedule)
        assert excinfo.value.step == 3


def _fixed_batch_loss(model, images, schedule):
    repeats = 4
    batch = images.repeat(repeats, 1, 1, 1)
    steps = torch.linspace(1, schedule.t_max, batch.shape[0]).long()
    noise = Rng(1000).normal(batch.shape, dtype=batch.dtype)
    with torch.no_grad():
        return float(training_loss(model, batch, schedule, t=steps, noise=noise))


def test_training_halves_the_loss_on_synthetic_images(schedule):
    images = stack_model_space(generate_synthetic(0, 8, 1, 0, size=32).train)
    config = TrainConfig(epochs=100, batch_size=4, learning_rate=2e-3, weight_decay=0.0)
    initial, final = [], []
    for seed in range(5):
        torch.manual_seed(seed)
        model = CompactDenoiser(hidden_channels=16, embedding_dim=32, dilations=(1, 2))
        initial.append(_fixed_batch_loss(model.eval(), images, schedule))
        train(model, images, config, Rng(seed), schedule)
        final.append(_fixed_batch_loss(model, images, schedule))
    assert statistics.median(final) < 0.5 * statistics.median(initial)
