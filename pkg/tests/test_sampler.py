import math

import numpy as np
import pytest

from aam.anomaly import build_memory_bank, calibrate, extract_patch_features
from aam.errors import ConfigError, NumericalError
from aam.sampler import (
    SamplerConfig,
    TuningState,
    adam_descent,
    baseline_sample,
    default_config,
    fd_gradient,
    fixed_tau_sample,
    map_perturb_steps,
    masked_perturb,
    optimize_tau,
    read_trace,
    sample,
    write_trace,
)
from aam.schedule import build_schedule, ddim_timesteps
from tests.conftest import random_images


class TestDefaultConfig:
    def test_stock_values_at_1000(self):
        cfg = default_config(1000)
        assert cfg.t1 == 920 and cfg.t2 == 600
        assert cfg.reinit_interval == 40
        assert cfg.perturb_steps == (921, 881, 841)
        assert cfg.opt_iters == 10 and cfg.opt_lr == 0.01 and cfg.grad_tol == 0.001
        assert cfg.gamma == 2.0 and cfg.beta_multiplier == 1.5
        assert cfg.ddim_steps == 250

    def test_scaled_values_at_100(self):
        cfg = default_config(100)
        assert cfg.t1 == 92 and cfg.t2 == 60
        assert cfg.reinit_interval == 4
        assert cfg.perturb_steps == (93, 89, 85)

    def test_perturb_steps_inside_extended_window(self):
        for total in (100, 250, 500, 1000):
            cfg = default_config(total)
            for ell in cfg.perturb_steps:
                assert cfg.t2 < ell <= cfg.t1 + 1

    def test_too_small_T(self):
        with pytest.raises(ConfigError):
            default_config(99)

    def test_validation(self):
        with pytest.raises(ConfigError, match="t1"):
            SamplerConfig(total_steps=100, t1=50, t2=60).validate()
        with pytest.raises(ConfigError, match="perturb"):
            SamplerConfig(total_steps=100, t1=90, t2=60, perturb_steps=(92,)).validate()
        with pytest.raises(ConfigError, match="ddim"):
            SamplerConfig(total_steps=100, t1=90, t2=60, ddim_steps=0).validate()


class TestFdGradient:
    def test_quadratic_exact(self):
        for h in (0.5, 0.25):
            assert fd_gradient(lambda x: x * x, 3.0, h) == 6.0

    def test_constant_zero(self):
        assert fd_gradient(lambda x: 4.2, 1.7, 0.01) == 0.0

    def test_sin_matches_cos(self):
        g = fd_gradient(math.sin, 0.7, 1e-3)
        assert abs(g - math.cos(0.7)) < 1e-6

    def test_nonfinite_objective(self):
        with pytest.raises(NumericalError):
            fd_gradient(lambda x: float("nan"), 0.0, 0.01)

    def test_bad_step(self):
        with pytest.raises(ConfigError):
            fd_gradient(lambda x: x, 0.0, 0.0)


class TestAdamDescent:
    def test_quadratic_monotone_convergence(self):
        target = 3.0
        x, history = adam_descent(
            lambda x: (x - target) ** 2, x0=0.0, lr=0.1, max_iters=20, grad_tol=1e-12
        )
        xs = [h.x for h in history] + [x]
        assert all(b > a for a, b in zip(xs, xs[1:]))  # monotone toward target
        assert xs[-1] <= target
        assert x > 1.5
        values = [h.value for h in history]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_converged_point_left_untouched(self):
        x, history = adam_descent(lambda x: 7.0, x0=1.23, lr=0.1, max_iters=10, grad_tol=1e-3)
        assert x == 1.23
        assert len(history) == 1

    def test_respects_iteration_cap(self):
        _, history = adam_descent(lambda x: x, x0=0.0, lr=0.1, max_iters=4, grad_tol=0.0)
        assert len(history) == 4


def window_config(**overrides):
    base = dict(
        total_steps=100, t1=92, t2=60, reinit_interval=4, opt_iters=10,
        opt_lr=0.1, grad_tol=1e-3, fd_step=0.01, ddim_steps=50, seed=0,
    )
    base.update(overrides)
    return SamplerConfig(**base)


class TestOptimizeTau:
    def test_immediate_early_stop_keeps_logit(self):
        cfg = window_config(grad_tol=float("inf"))
        states = [TuningState(tau_logit=0.3), TuningState(tau_logit=-0.2)]
        x = np.zeros((2, 1, 8, 8), dtype=np.float32)
        objective = lambda logits, rows: (logits - 2.0) ** 2
        # t=91: (92-91) % 4 != 0, no re-initialization
        optimize_tau(x, 91, states, None, None, None, cfg, objective=objective)
        assert states[0].tau_logit == 0.3 and states[1].tau_logit == -0.2
        assert all(s.iterations_used == 1 for s in states)

    def test_reinitialization_at_window_top(self):
        cfg = window_config(grad_tol=float("inf"))
        states = [TuningState(tau_logit=5.0, adam_m=1.0, adam_v=2.0, adam_count=3)]
        x = np.zeros((1, 1, 8, 8), dtype=np.float32)
        objective = lambda logits, rows: np.zeros_like(logits)
        optimize_tau(x, 92, states, None, None, None, cfg, objective=objective)
        assert states[0].tau_logit == 0.0
        assert states[0].adam_m == 0.0 and states[0].adam_count == 0

    def test_quadratic_descent_moves_toward_target(self):
        cfg = window_config(opt_iters=30, grad_tol=1e-12)
        states = [TuningState()]
        x = np.zeros((1, 1, 8, 8), dtype=np.float32)
        objective = lambda logits, rows: (logits - 1.0) ** 2
        optimize_tau(x, 91, states, None, None, None, cfg, objective=objective)
        assert 0.5 < states[0].tau_logit <= 1.1
        assert states[0].iterations_used <= 30

    def test_per_sample_independent_early_stop(self):
        cfg = window_config(opt_iters=5, grad_tol=0.5)
        states = [TuningState(), TuningState(tau_logit=10.0)]
        x = np.zeros((2, 1, 8, 8), dtype=np.float32)
        # sample 0 sits at a flat point, sample 1 on a steep slope
        objective = lambda logits, rows: np.where(rows < 1, 0.0, 10.0 * logits)
        optimize_tau(x, 91, states, None, None, None, cfg, objective=objective)
        assert states[0].iterations_used == 1
        assert states[1].iterations_used == 5
        assert states[1].tau_logit < 10.0

    def test_outside_window_rejected(self):
        cfg = window_config()
        with pytest.raises(ConfigError, match="window"):
            optimize_tau(
                np.zeros((1, 1, 8, 8), dtype=np.float32), 95, [TuningState()],
                None, None, None, cfg, objective=lambda l, r: l,
            )


class TestMaskedPerturb:
    def test_empty_mask_identity(self):
        x = random_images(2, 8, seed=0)
        out = masked_perturb(x, np.zeros((8, 8)), beta=0.5, seed=1)
        assert np.array_equal(out, x)

    def test_full_mask_is_standard_normal(self):
        x = np.zeros((1, 1, 32, 32), dtype=np.float32)
        out = masked_perturb(x, np.zeros((32, 32)), beta=-1.0, seed=2)
        assert abs(out.mean()) < 0.1
        assert abs(out.var() - 1.0) < 0.15

    def test_checkerboard_locality(self):
        x = random_images(1, 8, seed=3)
        heat = np.indices((8, 8)).sum(axis=0) % 2
        out = masked_perturb(x, heat, beta=0.5, seed=4)
        mask = heat > 0.5
        assert np.array_equal(out[0, 0][~mask], x[0, 0][~mask])
        assert np.all(out[0, 0][mask] != x[0, 0][mask])

    def test_deterministic_for_seed(self):
        x = random_images(1, 8, seed=5)
        heat = np.ones((8, 8))
        a = masked_perturb(x, heat, beta=0.0, seed=[9, 1])
        b = masked_perturb(x, heat, beta=0.0, seed=[9, 1])
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError, match="spatial"):
            masked_perturb(random_images(1, 8), np.zeros((4, 4)), 0.0, 0)


def make_calibrated_bank(model, schedule, seed=0):
    images = random_images(8, model.config.image_size, seed=seed)
    feats = extract_patch_features(images[:6], model, 0)
    bank = build_memory_bank(feats.reshape(-1, feats.shape[-1]), 0.5, seed=seed)
    calibrate(bank, images[6:], model, schedule, [80], seed=seed + 1)
    return bank


class TestSampling:
    def test_uncalibrated_bank_rejected(self, tiny_model, schedule100):
        cfg = window_config()
        bank = build_memory_bank(np.zeros((3, 2), dtype=np.float32) + np.arange(3)[:, None], 1.0)
        with pytest.raises(ConfigError, match="calibrated"):
            sample(tiny_model, bank, schedule100, cfg, count=1)

    def test_reduction_identity(self, tiny_model, schedule100):
        cfg = SamplerConfig(total_steps=100, t1=0, t2=0, ddim_steps=10, seed=7)
        adaptive = sample(tiny_model, None, schedule100, cfg, count=4, seed=7)
        plain = baseline_sample(tiny_model, schedule100, 10, count=4, seed=7)
        assert np.array_equal(adaptive.images, plain)
        assert all(len(s.trace) == 0 for s in adaptive.states)

    def test_full_run_deterministic(self, tiny_model, schedule100):
        bank = make_calibrated_bank(tiny_model, schedule100)
        cfg = window_config(opt_iters=3)
        a = sample(tiny_model, bank, schedule100, cfg, count=2, seed=3)
        b = sample(tiny_model, bank, schedule100, cfg, count=2, seed=3)
        assert np.array_equal(a.images, b.images)
        assert [s.trace for s in a.states] == [s.trace for s in b.states]

    def test_trace_structure_and_bounds(self, tiny_model, schedule100):
        bank = make_calibrated_bank(tiny_model, schedule100)
        cfg = window_config(opt_iters=3)
        result = sample(tiny_model, bank, schedule100, cfg, count=2, seed=4)
        visited = [int(t) for t in ddim_timesteps(100, 50) if 60 < t <= 92]
        for state in result.states:
            steps = [r.timestep for r in state.trace]
            assert steps == visited  # strictly decreasing by construction
            for r in state.trace:
                assert r.iterations <= cfg.opt_iters
                assert 0.01 < r.tau < 100.0
                assert r.tau == pytest.approx(10.0 ** (2.0 * math.tanh(r.tau_logit)), rel=1e-12)

    def test_perturbation_mapping_and_flags(self, tiny_model, schedule100):
        bank = make_calibrated_bank(tiny_model, schedule100)
        cfg = window_config(opt_iters=2, perturb_steps=(93, 89, 85))
        visited = ddim_timesteps(100, 50)
        mapping = map_perturb_steps(cfg, visited)
        assert mapping == {92: [93], 88: [89], 84: [85]}
        result = sample(tiny_model, bank, schedule100, cfg, count=1, seed=5)
        perturbed = {r.timestep for r in result.states[0].trace if r.perturbed}
        assert perturbed == set(mapping)

    def test_sample_shares_seeds_with_baseline(self, tiny_model, schedule100):
        # identical initial noise: disabling the window reproduces baseline
        cfg_off = SamplerConfig(total_steps=100, t1=0, t2=0, ddim_steps=5, seed=11)
        a = sample(tiny_model, None, schedule100, cfg_off, count=3, seed=11).images
        b = baseline_sample(tiny_model, schedule100, 5, count=3, seed=11)
        assert np.array_equal(a, b)

    def test_fixed_tau_unit_equals_baseline(self, tiny_model, schedule100):
        ladder = tiny_model.config.attention_resolutions
        fixed = fixed_tau_sample(
            tiny_model, schedule100, 10, {r: 1.0 for r in ladder}, count=3, seed=6
        )
        plain = baseline_sample(tiny_model, schedule100, 10, count=3, seed=6)
        assert np.array_equal(fixed, plain)

    def test_fixed_tau_changes_output(self, tiny_model, schedule100):
        ladder = tiny_model.config.attention_resolutions
        sharp = fixed_tau_sample(
            tiny_model, schedule100, 10, {r: 0.1 for r in ladder}, count=2, seed=6
        )
        plain = baseline_sample(tiny_model, schedule100, 10, count=2, seed=6)
        assert np.abs(sharp - plain).max() > 0


class TestTraceFile:
    def test_roundtrip(self, tmp_path, tiny_model, schedule100):
        bank = make_calibrated_bank(tiny_model, schedule100)
        cfg = window_config(opt_iters=2, perturb_steps=(93,))
        result = sample(tiny_model, bank, schedule100, cfg, count=1, seed=8)
        path = str(tmp_path / "trace_000.csv")
        write_trace(path, result.states[0])
        records = read_trace(path)
        assert len(records) == len(result.states[0].trace)
        for got, want in zip(records, result.states[0].trace):
            assert got.timestep == want.timestep
            assert got.iterations == want.iterations
            assert got.tau_logit == pytest.approx(want.tau_logit, rel=1e-9)
            assert got.score == pytest.approx(want.score, rel=1e-9)
            assert got.perturbed == want.perturbed
