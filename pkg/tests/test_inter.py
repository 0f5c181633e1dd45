import math

import numpy as np
import pytest

from qncd.core import Rng
from qncd.inter import (
    CorrectionMode, NoiseEstimate, apply_correction, corrected_sample_loop, estimate_noise,
    probe_timestep, sample_loop, stage_plan,
)
from qncd.schedule import linear_schedule, timestep_sequence

S = linear_schedule(100, 1e-4, 0.02)


def test_stage_plan_examples():
    steps = timestep_sequence(S)
    assert stage_plan(steps, 4).indices == (0, 25, 50, 75)
    assert stage_plan(steps, 4).timesteps(steps) == [100, 75, 50, 25]
    assert stage_plan(steps, 1).indices == (0,)
    assert stage_plan(steps, 100).indices == tuple(range(100))
    assert stage_plan(7, 3).indices == (0, 2, 4)
    assert stage_plan(steps, 0).num_stages == 0
    for bad in (-1, 101):
        with pytest.raises(ValueError):
            stage_plan(steps, bad)


def _synthetic_qnet(x_prev, t, deviation):
    """A network that sees through the probe: returns the injected z1 plus ``deviation(x_hat)``."""
    a = S.alpha[t]

    def qnet(x_hat, tt):
        assert tt == t
        z1 = (x_hat - math.sqrt(a) * x_prev) / math.sqrt(1 - a)
        return z1 + deviation(x_hat)
    return qnet


def test_estimator_zero_noise():
    x = Rng(0).stream("x").standard_normal((4096, 2))
    est = estimate_noise(_synthetic_qnet(x, 40, lambda h: 0.0), x, 40, S, Rng(1).stream("p"))
    assert np.all(np.abs(est.mu_q) < 1e-12)
    assert np.all(est.sigma_q < 1e-12)
    assert est.batch_size == 4096


def test_estimator_recovers_bias_and_spread():
    x = Rng(2).stream("x").standard_normal((4096, 2))
    g = Rng(3).stream("g")
    est = estimate_noise(_synthetic_qnet(x, 40, lambda h: 0.1), x, 40, S, Rng(4).stream("p"))
    assert np.all(np.abs(est.mu_q - 0.1) <= 0.01)
    est = estimate_noise(_synthetic_qnet(x, 40, lambda h: 0.1 + 0.2 * g.standard_normal(h.shape)),
                         x, 40, S, Rng(5).stream("p"))
    assert np.all(np.abs(est.mu_q - 0.1) <= 0.01)
    assert np.all((est.sigma_q >= 0.18) & (est.sigma_q <= 0.22))


def test_estimator_single_sample_pools_dimensions():
    x = np.array([[0.5, -0.5]])
    est = estimate_noise(_synthetic_qnet(x, 10, lambda h: np.array([[0.1, 0.3]])), x, 10, S,
                         Rng(6).stream("p"))
    assert np.allclose(est.mu_q, [0.2, 0.2]) and np.allclose(est.sigma_q, [0.1, 0.1])
    with pytest.raises(ValueError):
        estimate_noise(lambda h, t: h, np.zeros((0, 2)), 10, S, Rng(6).stream("p"))


def test_estimator_error_shrinks_with_root_batch():
    # fixed deviation function plus independent noise; RMS error over repeats
    dev = lambda h: 0.05 * np.sin(h) + 0.1  # noqa: E731
    g = Rng(7).stream("noise")

    def rms(b):
        errs = []
        for r in range(150):
            x = Rng(8).stream("x", b, r).standard_normal((b, 2))
            target = None

            def qd(h):
                nonlocal target
                d = dev(h)
                target = d.mean(axis=0)
                return d + 0.3 * g.standard_normal(h.shape)
            est = estimate_noise(_synthetic_qnet(x, 30, qd), x, 30, S, Rng(9).stream("p", b, r))
            errs.append(est.mu_q - target)
        return float(np.sqrt(np.mean(np.square(errs))))
    ratio = rms(256) / rms(4096)
    assert 4 / 2 <= ratio <= 4 * 2


def test_apply_correction_modes():
    eps = Rng(10).stream("e").standard_normal((4096, 2))
    assert np.array_equal(apply_correction(eps, NoiseEstimate.zero(2)), eps)
    est = NoiseEstimate(np.array([0.1, -0.2]), np.array([0.0, 0.0]))
    assert np.allclose(apply_correction(eps + est.mu_q, est), eps, atol=1e-15)
    # zero sigma falls back to the mean-only rule
    assert np.array_equal(apply_correction(eps, est, "mean_var"), apply_correction(eps, est))
    with pytest.raises(ValueError):
        apply_correction(np.ones((3, 3)), est)
    with pytest.raises(ValueError):
        apply_correction(eps, est, "median")


def test_mean_var_removes_synthetic_corruption():
    n = 20_000
    gen = Rng(11).stream("mv")
    clean = 0.5 + 0.8 * gen.standard_normal((n, 2))
    dirty = clean + 0.1 + 0.2 * gen.standard_normal((n, 2))
    fixed = apply_correction(dirty, NoiseEstimate(np.full(2, 0.1), np.full(2, 0.2)), CorrectionMode.MEAN_VAR)
    se_m, se_s = 0.8 / math.sqrt(n), 0.8 / math.sqrt(2 * n)
    assert np.all(np.abs(fixed.mean(0) - clean.mean(0)) < 4 * 0.83 / math.sqrt(n))
    assert np.all(np.abs(fixed.std(0) - 0.8) < 4 * se_s + 4 * se_m)
    assert np.all(np.abs(dirty.std(0) - 0.8) > 0.015)


def test_mean_var_floor_for_overestimated_noise():
    eps = Rng(12).stream("e").standard_normal((100, 1))
    out = apply_correction(eps, NoiseEstimate(np.zeros(1), np.full(1, 10.0)), "mean_var")
    assert np.all(np.isfinite(out)) and out.std() < 1e-5


# ---------------------------------------------------------------- sampling loop

def _linear_eps(x, t):
    return 0.3 * x


def test_zero_stages_equals_plain_loop():
    a = sample_loop(_linear_eps, S, 64, 2, Rng(13))
    b = sample_loop(_linear_eps, S, 64, 2, Rng(13), plan=stage_plan(100, 0))
    assert np.array_equal(a.samples, b.samples)
    assert a.eval_count == b.eval_count == 100


def test_eval_counter_and_markers():
    run = corrected_sample_loop(_linear_eps, S, stage_plan(100, 4), 32, 2, Rng(14))
    assert run.eval_count == 104
    assert [r.index for r in run.records if r.is_estimation] == [0, 25, 50, 75]
    run = sample_loop(_linear_eps, S, 32, 2, Rng(14), sampler="ddim:20", plan=stage_plan(20, 4))
    assert run.eval_count == 24 and len(run.records) == 20


def test_plan_must_match_sampler():
    with pytest.raises(ValueError):
        sample_loop(_linear_eps, S, 8, 2, Rng(0), sampler="ddim:20", plan=stage_plan(100, 4))


def test_correction_is_stage_local():
    # eps depends only on t, so every corrected output is c(t) - mu of the active stage
    c = lambda t: np.array([math.sin(t), math.cos(t)])  # noqa: E731
    eps_fn = lambda x, t: np.tile(c(t), (x.shape[0], 1))  # noqa: E731
    run = sample_loop(eps_fn, S, 16, 2, Rng(15), plan=stage_plan(100, 4))
    active = None
    for rec in run.records:
        if rec.is_estimation:
            active = rec.estimate
            assert active.stage == [0, 25, 50, 75].index(rec.index)
        assert np.allclose(rec.eps, c(rec.t) - active.mu_q, atol=1e-14)


def test_probe_timestep_mapping():
    assert probe_timestep(50, S) == 51
    assert probe_timestep(100, S) == 100


def test_common_random_numbers_across_networks():
    a = sample_loop(lambda x, t: 0.3 * x, S, 8, 2, Rng(16))
    b = sample_loop(lambda x, t: 0.3 * x + 1e-3, S, 8, 2, Rng(16))
    assert np.allclose(a.samples, b.samples, atol=0.05)
    assert not np.array_equal(a.samples, b.samples)


def test_full_precision_correction_vanishes_with_batch(fp_model, schedule):
    # at full precision the estimate only reflects finite-batch fluctuation
    def mean_abs_mu(n):
        vals = []
        for seed in range(4):
            run = sample_loop(fp_model, schedule, n, 2, Rng(17 + seed), plan=stage_plan(100, 4))
            vals += [np.abs(r.estimate.mu_q) for r in run.records if r.is_estimation]
        return float(np.mean(vals))
    small, large = mean_abs_mu(256), mean_abs_mu(4096)
    assert large < small / 2
