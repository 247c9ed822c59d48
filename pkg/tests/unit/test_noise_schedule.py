"""Tests for the noise schedule, image containers and seeded streams."""

import math

import numpy as np
import pytest
import torch
from noise_schedule import (
    RANGE_UNIT,
    ImageTensor,
    MaskImage,
    NoiseSchedule,
    Rng,
    build_schedule,
    forward_noise,
    sigma_t,
)


class TestBuildSchedule:
    def test_alpha_bar_zero_is_one(self, schedule):
        assert schedule.alpha_bar(0) == 1.0
        assert schedule.t_max == 1000

    def test_alpha_bars_strictly_decrease(self, schedule):
        assert np.all(np.diff(schedule.alpha_bars) < 0)

    def test_endpoints_match_linear_betas(self, schedule):
        assert schedule.betas[0] == pytest.approx(1e-4)
        assert schedule.betas[-1] == pytest.approx(0.02)
        assert schedule.alpha_bar(1) == pytest.approx(1 - 1e-4)

    def test_alpha_bar_t_max_is_small(self, schedule):
        assert 0 < schedule.alpha_bar(1000) < 1e-3

    def test_single_step(self):
        single = build_schedule(t_max=1, beta_start=0.5, beta_end=0.5)
        assert single.alpha_bar(1) == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"t_max": 0},
            {"beta_start": 0.0},
            {"beta_start": 0.03, "beta_end": 0.02},
            {"beta_end": 1.0},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            build_schedule(**kwargs)

    def test_timestep_out_of_range(self, schedule):
        with pytest.raises(ValueError):
            schedule.alpha_bar(1001)

    def test_from_betas_rejects_bad_values(self):
        with pytest.raises(ValueError):
            NoiseSchedule.from_betas([0.1, 1.0])


def test_sigma_is_zero_on_final_step(schedule):
    assert sigma_t(schedule, 0, 20) == 0.0


def test_sigma_matches_formula(schedule):
    a_s, a_t = schedule.alpha_bar(180), schedule.alpha_bar(200)
    expected = math.sqrt((1 - a_s) / (1 - a_t)) * math.sqrt(1 - a_t / a_s)
    assert sigma_t(schedule, 180, 200) == pytest.approx(expected)


def test_sigma_requires_s_below_t(schedule):
    with pytest.raises(ValueError):
        sigma_t(schedule, 200, 200)


class TestRng:
    def test_same_seed_same_draws(self):
        assert torch.equal(Rng(3).normal((4, 4)), Rng(3).normal((4, 4)))

    def test_spawn_ignores_consumption(self):
        fresh = Rng(11)
        used = Rng(11)
        used.normal((100,))
        assert torch.equal(fresh.spawn(2).normal((5,)), used.spawn(2).normal((5,)))

    def test_spawned_streams_differ(self):
        rng = Rng(11)
        assert not torch.equal(rng.spawn(0).normal((5,)), rng.spawn(1).normal((5,)))

    @pytest.mark.parametrize("seed", [-1, 2**64, 1.5, True])
    def test_rejects_invalid_seed(self, seed):
        with pytest.raises(ValueError):
            Rng(seed)

    def test_normal_respects_dtype(self):
        assert Rng(0).normal((2, 2), dtype=torch.float64).dtype == torch.float64


class TestForwardNoise:
    def test_t_zero_is_identity(self, schedule):
        x0 = torch.rand(3, 8, 8)
        x_t, _ = forward_noise(x0, 0, schedule, rng=Rng(0))
        assert torch.equal(x_t, x0)

    def test_uses_given_noise(self, schedule):
        x0 = torch.zeros(1, 2, 2)
        noise = torch.ones(1, 2, 2)
        x_t, eps = forward_noise(x0, 500, schedule, noise=noise)
        assert torch.equal(eps, noise)
        assert torch.allclose(x_t, torch.full_like(x0, math.sqrt(1 - schedule.alpha_bar(500))))

    def test_needs_rng_or_noise(self, schedule):
        with pytest.raises(ValueError):
            forward_noise(torch.zeros(1, 2, 2), 10, schedule)

    def test_rejects_non_finite(self, schedule):
        with pytest.raises(ValueError):
            forward_noise(torch.tensor([[[float("nan")]]]), 10, schedule, rng=Rng(0))


class TestImageContainers:
    def test_unit_image_converts_to_model_space(self):
        image = ImageTensor(torch.tensor([[[0.0, 0.5, 1.0]]]), RANGE_UNIT)
        assert torch.equal(image.to_model_space().data, torch.tensor([[[-1.0, 0.0, 1.0]]]))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageTensor(torch.full((1, 2, 2), 1.5))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            ImageTensor(torch.zeros(2, 2))

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError):
            MaskImage(torch.full((2, 2), 0.5))

    def test_mask_shape_check(self):
        with pytest.raises(ValueError):
            MaskImage.ones(4, 4).check_matches(ImageTensor(torch.zeros(3, 4, 5)))

    def test_mask_coverage(self):
        mask = MaskImage(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
        assert mask.coverage == pytest.approx(0.25)
