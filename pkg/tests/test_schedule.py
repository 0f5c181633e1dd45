import math
from fractions import Fraction

import numpy as np
import pytest

from qncd.core import Rng
from qncd.schedule import (
    ddim_step, ddpm_step, from_betas, linear_schedule, marginal_diffuse, predict_x0,
    single_step_diffuse, timestep_sequence,
)


def test_constant_schedule_example():
    s = linear_schedule(2, 0.1, 0.1)
    assert s.beta[1:].tolist() == [0.1, 0.1]
    assert s.alpha_bar[1:] == pytest.approx([0.9, 0.81], rel=1e-15)


def test_alpha_bar_matches_exact_product():
    s = linear_schedule(100, 1e-4, 0.02)
    # exact rational product of the stored float64 alphas
    prod = Fraction(1)
    for t in range(1, 101):
        prod *= Fraction(float(s.alpha[t]))
        assert abs(s.alpha_bar[t] - float(prod)) <= 1e-12 * float(prod)
    assert float(prod) == pytest.approx(0.3635632480554922, rel=1e-13)


def test_schedule_invariants():
    s = linear_schedule(100, 1e-4, 0.02)
    assert np.all(s.alpha[1:] + s.beta[1:] == 1.0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar[1:] > 0) & (s.alpha_bar[1:] < 1))
    assert s.beta[1] == 1e-4 and s.beta[100] == 0.02
    assert np.allclose(s.sigma[1:], np.sqrt(s.beta[1:]))


def test_posterior_variance_option():
    s = linear_schedule(10, 0.01, 0.1, variance="posterior")
    assert s.sigma[1] == 0.0
    t = 5
    expect = (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t]
    assert s.sigma[t] ** 2 == pytest.approx(expect, rel=1e-14)


@pytest.mark.parametrize("args", [(1, 0.1, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_linear_schedule_rejects_bad_params(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_marginal_diffuse_examples():
    s = linear_schedule(100, 1e-4, 0.02)
    x0 = np.array([[1.5, -2.0]])
    assert np.array_equal(marginal_diffuse(x0, 30, s, np.zeros_like(x0)), np.sqrt(s.alpha_bar[30]) * x0)
    tiny = from_betas([1e-12, 1e-12])
    assert np.allclose(marginal_diffuse(x0, 1, tiny, np.ones_like(x0)), x0, atol=1e-5)
    with pytest.raises(ValueError):
        marginal_diffuse(x0, 1, s, np.zeros(3))


def test_marginal_moments_match_iterated_single_steps():
    s = linear_schedule(100, 1e-4, 0.02)
    gen = Rng(9).stream("mc")
    n, t = 100_000, 60
    x0 = np.full((n, 1), 1.3)
    direct = marginal_diffuse(x0, t, s, gen.standard_normal((n, 1)))
    chained = x0.copy()
    for k in range(1, t + 1):
        chained = single_step_diffuse(chained, k, s, gen.standard_normal((n, 1)))
    m, v = np.sqrt(s.alpha_bar[t]) * 1.3, 1 - s.alpha_bar[t]
    se_m, se_v = math.sqrt(v / n), v * math.sqrt(2 / n)
    for x in (direct, chained):
        assert abs(x.mean() - m) < 4 * se_m
        assert abs(x.var() - v) < 4 * se_v


def test_single_step_examples():
    s = from_betas([0.19, 0.5])
    x = np.array([[2.0, -1.0]])
    assert single_step_diffuse(x, 1, s, np.zeros_like(x)) == pytest.approx(0.9 * x, rel=1e-15)
    tiny = from_betas([1e-300, 0.5])
    assert np.array_equal(single_step_diffuse(x, 1, tiny, np.ones_like(x)), x)


def test_ddpm_step_hand_value():
    # alpha_t = 0.99, alpha_bar_t = 0.5
    s = from_betas([1 - 0.5 / 0.99, 0.01])
    assert s.alpha_bar[2] == pytest.approx(0.5, rel=1e-15)
    out = ddpm_step(np.array([[1.0]]), np.array([[0.2]]), 2, s, np.zeros((1, 1)))
    assert out[0, 0] == pytest.approx(1.0021951390411372, rel=1e-13)


def test_ddpm_step_linearity_and_final_step():
    s = linear_schedule(100, 1e-4, 0.02)
    gen = Rng(1).stream("x")
    x, e, z = (gen.standard_normal((5, 2)) for _ in range(3))
    t = 40
    diff = ddpm_step(x, e, t, s, z) - ddpm_step(x, np.zeros_like(e), t, s, z)
    coef = -(s.beta[t] / math.sqrt(1 - s.alpha_bar[t])) / math.sqrt(s.alpha[t])
    assert np.allclose(diff, coef * e, rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        ddpm_step(x, e, 1, s, z)
    ddpm_step(x, e, 1, s, np.zeros_like(z))


def test_ddim_recovers_x0_with_true_noise():
    s = linear_schedule(100, 1e-4, 0.02)
    gen = Rng(2).stream("x")
    x0, eps = gen.standard_normal((8, 2)), gen.standard_normal((8, 2))
    xt = marginal_diffuse(x0, 73, s, eps)
    assert np.allclose(ddim_step(xt, eps, 73, 0, s), x0, atol=1e-10)
    assert np.allclose(predict_x0(xt, eps, 73, s), x0, atol=1e-10)
    # two jumps with the true noise land on the same x0 as one jump
    mid = ddim_step(xt, eps, 73, 30, s)
    assert np.allclose(predict_x0(mid, eps, 30, s), x0, atol=1e-10)


def test_ddim_identity_and_errors():
    s = linear_schedule(100, 1e-4, 0.02)
    x = np.ones((2, 2))
    assert np.array_equal(ddim_step(x, np.zeros_like(x), 10, 10, s), x)
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 11, s)
    with pytest.raises(ValueError):
        ddim_step(x, np.ones((2, 3)), 10, 5, s)


def test_timestep_sequences():
    s = linear_schedule(100, 1e-4, 0.02)
    assert timestep_sequence(s) == list(range(100, 0, -1))
    d = timestep_sequence(s, "ddim:10")
    assert d[0] == 100 and d[-1] == 1 and len(d) == 10 and d == sorted(d, reverse=True)
    with pytest.raises(ValueError):
        timestep_sequence(s, "euler")


def test_ddpm_sampling_matches_gaussian_data_moments():
    # pure Gaussian data N(mu, sd^2): the exact eps is linear in x_t
    s = linear_schedule(100, 1e-4, 0.02)
    mu, sd = 0.7, 0.5
    gen = Rng(4).stream("loop")
    n = 40_000
    ab_T = s.alpha_bar[100]
    x = math.sqrt(ab_T) * mu + math.sqrt(ab_T * sd**2 + 1 - ab_T) * gen.standard_normal((n, 1))
    for t in range(100, 0, -1):
        ab = s.alpha_bar[t]
        var = ab * sd**2 + 1 - ab
        eps = math.sqrt(1 - ab) * (x - math.sqrt(ab) * mu) / var
        z = gen.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = ddpm_step(x, eps, t, s, z)
    assert abs(x.mean() - mu) < 4 * sd / math.sqrt(n)
    assert abs(x.std() - sd) < 4 * sd / math.sqrt(2 * n)
