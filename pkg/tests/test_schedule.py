import numpy as np
import pytest

from aam.errors import ConfigError, NumericalError, ShapeMismatchError
from aam.schedule import (
    NoiseSchedule,
    build_schedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    predict_x0,
)


def synthetic_schedule(alpha_bars):
    """Hand-built tables for limit cases the constructor cannot produce."""
    a = np.asarray(alpha_bars, dtype=np.float64)
    betas = np.zeros_like(a)
    return NoiseSchedule(total_steps=len(a), betas=betas, alphas=1.0 - betas, alpha_bars=a)


class TestBuildSchedule:
    def test_constant_beta_cumprod(self):
        s = build_schedule(2, "linear", 0.5, 0.5)
        assert np.allclose(s.betas, [0.5, 0.5])
        assert np.allclose(s.alpha_bars, [0.5, 0.25])

    def test_linear_1000_monotone(self):
        s = build_schedule(1000, "linear", 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert 0.0 < s.alpha_bars[-1] < 1.0
        assert np.all(s.alphas == 1.0 - s.betas)
        assert abs(s.alpha_bars[0] - (1.0 - s.betas[0])) <= 1e-12
        assert np.all((s.betas > 0) & (s.betas < 1))

    def test_cumprod_matches_loop_oracle(self):
        s = build_schedule(10, "linear", 0.1, 0.2)
        prod = 1.0
        for beta in s.betas:
            prod *= 1.0 - beta
        assert abs(s.alpha_bars[9] - prod) <= 1e-15

    def test_cosine_schedule_valid(self):
        s = build_schedule(100, "cosine")
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] > 0
        assert np.all((s.betas > 0) & (s.betas < 1))

    @pytest.mark.parametrize(
        "kwargs, fragment",
        [
            (dict(total_steps=1), "total_steps"),
            (dict(total_steps=10, beta_min=0.0), "beta"),
            (dict(total_steps=10, beta_min=0.2, beta_max=0.1), "beta"),
            (dict(total_steps=10, beta_max=1.0), "beta"),
            (dict(total_steps=10, kind="quadratic"), "kind"),
        ],
    )
    def test_invalid_config_names_field(self, kwargs, fragment):
        with pytest.raises(ConfigError, match=fragment):
            build_schedule(**kwargs)


class TestForwardDiffuse:
    def test_zero_noise_weight_returns_x0(self):
        s = synthetic_schedule([1.0, 0.5])
        x0 = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
        eps = np.random.default_rng(1).standard_normal((2, 1, 8, 8))
        out = forward_diffuse(x0, 0, eps, s)
        assert np.array_equal(out, x0)

    def test_zero_signal_linearity(self, schedule10):
        eps = np.random.default_rng(1).standard_normal((2, 1, 8, 8))
        out = forward_diffuse(np.zeros_like(eps), 3, eps, schedule10)
        expected = np.sqrt(1.0 - schedule10.alpha_bars[3]) * eps
        assert np.allclose(out, expected, atol=1e-12)

    def test_scalar_reference_oracle(self, schedule10):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((1, 1, 4, 4))
        eps = rng.standard_normal((1, 1, 4, 4))
        out = forward_diffuse(x0, 5, eps, schedule10)
        import math

        a = math.sqrt(schedule10.alpha_bars[5])
        b = math.sqrt(1.0 - schedule10.alpha_bars[5])
        for idx in np.ndindex(x0.shape):
            assert out[idx] == pytest.approx(a * x0[idx] + b * eps[idx], abs=1e-12)

    def test_shape_mismatch(self, schedule10):
        with pytest.raises(ShapeMismatchError):
            forward_diffuse(np.zeros((1, 1, 4, 4)), 0, np.zeros((1, 1, 8, 8)), schedule10)

    def test_bad_timestep(self, schedule10):
        with pytest.raises(ConfigError):
            forward_diffuse(np.zeros((1, 1, 4, 4)), 10, np.zeros((1, 1, 4, 4)), schedule10)


class TestPredictX0:
    def test_inverts_forward(self, schedule10):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((2, 1, 8, 8))
        eps = rng.standard_normal((2, 1, 8, 8))
        for t in range(10):
            x_t = forward_diffuse(x0, t, eps, schedule10)
            assert np.abs(predict_x0(x_t, eps, t, schedule10) - x0).max() < 1e-6

    def test_identity_at_unit_alpha_bar(self):
        s = synthetic_schedule([1.0, 0.5])
        x_t = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        out = predict_x0(x_t, np.zeros_like(x_t), 0, s)
        assert np.array_equal(out, x_t)

    def test_scalar_reference_oracle(self, schedule10):
        import math

        rng = np.random.default_rng(4)
        x_t = rng.standard_normal((1, 1, 4, 4))
        eps = rng.standard_normal((1, 1, 4, 4))
        out = predict_x0(x_t, eps, 5, schedule10)
        a = math.sqrt(schedule10.alpha_bars[5])
        b = math.sqrt(1.0 - schedule10.alpha_bars[5])
        for idx in np.ndindex(x_t.shape):
            assert out[idx] == pytest.approx((x_t[idx] - b * eps[idx]) / a, abs=1e-12)

    def test_division_guard(self):
        s = synthetic_schedule([1e-13])
        with pytest.raises(NumericalError):
            predict_x0(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)), 0, s)


class TestDdimStep:
    def test_final_step_collapses_to_prediction(self, schedule10):
        rng = np.random.default_rng(5)
        x_t = rng.standard_normal((1, 1, 4, 4))
        eps = rng.standard_normal((1, 1, 4, 4))
        out = ddim_step(x_t, eps, 3, -1, schedule10)
        assert np.array_equal(out, predict_x0(x_t, eps, 3, schedule10))

    def test_consistency_with_forward(self, schedule10):
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal((2, 1, 8, 8))
        eps = rng.standard_normal((2, 1, 8, 8))
        x_t = forward_diffuse(x0, 7, eps, schedule10)
        stepped = ddim_step(x_t, eps, 7, 2, schedule10)
        renoised = forward_diffuse(x0, 2, eps, schedule10)
        assert np.abs(stepped - renoised).max() < 1e-9

    def test_ordering_error(self, schedule10):
        x = np.zeros((1, 1, 4, 4))
        with pytest.raises(ConfigError):
            ddim_step(x, x, 3, 3, schedule10)
        with pytest.raises(ConfigError):
            ddim_step(x, x, 3, 5, schedule10)

    def test_chain_determinism(self, schedule100):
        # deterministic pseudo-denoiser; two identical chains must agree bitwise
        def run():
            x = np.random.default_rng(42).standard_normal((1, 1, 8, 8))
            ts = ddim_timesteps(100, 10)
            for i, t in enumerate(ts):
                t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
                eps = np.tanh(0.5 * x)
                x = ddim_step(x, eps, int(t), t_prev, schedule100)
            return x

        assert np.array_equal(run(), run())


class TestDdimTimesteps:
    def test_grid_shape_and_order(self):
        ts = ddim_timesteps(1000, 250)
        assert len(ts) == 250
        assert ts[0] == 996 and ts[-1] == 0
        assert np.all(np.diff(ts) == -4)

    def test_grid_hits_reinit_multiples(self):
        ts = set(ddim_timesteps(1000, 250).tolist())
        assert {920, 880, 840, 800, 640, 600} <= ts

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ddim_timesteps(100, 0)
        with pytest.raises(ConfigError):
            ddim_timesteps(100, 101)
