"""Diffusion coefficient tables and the forward / reverse update rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_tensor, check_same_shape

VARIANCES = ("fixed_small", "posterior")


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient arrays indexed by timestep ``t`` in ``0..T``.

    Index 0 is a padding entry standing for clean data (``alpha_bar[0] == 1``,
    ``beta[0] == 0``), which lets DDIM jump straight to ``t_prev = 0``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    variance: str = "fixed_small"

    def check(self, t: int, *, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "variance": self.variance,
            "beta": self.beta[1:].tolist(),
        }


def from_betas(betas, variance: str = "fixed_small") -> NoiseSchedule:
    betas = as_tensor(betas)
    if betas.ndim != 1 or betas.size < 2:
        raise ValueError("need at least two betas")
    if not np.all((betas > 0) & (betas < 1)):
        raise ValueError("betas must lie in (0, 1)")
    if variance not in VARIANCES:
        raise ValueError(f"unknown variance {variance!r}; expected one of {VARIANCES}")
    T = betas.size
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance == "fixed_small":
        sigma = np.sqrt(beta)
    else:
        # beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
        sigma = np.zeros_like(beta)
        sigma[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma, variance)


def linear_schedule(T: int, beta_start: float, beta_end: float,
                    variance: str = "fixed_small") -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return from_betas(np.linspace(beta_start, beta_end, T), variance)


def marginal_diffuse(x0, t: int, s: NoiseSchedule, eps) -> np.ndarray:
    """Sample x_t | x_0 in closed form."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    check_same_shape("marginal_diffuse", x0, eps)
    t = s.check(t)
    ab = s.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def single_step_diffuse(x_prev, t: int, s: NoiseSchedule, z1) -> np.ndarray:
    """One forward transition x_{t-1} -> x_t with injected noise ``z1``."""
    x_prev, z1 = as_tensor(x_prev), as_tensor(z1)
    check_same_shape("single_step_diffuse", x_prev, z1)
    t = s.check(t)
    a = s.alpha[t]
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * z1


def ddpm_step(x_t, eps_pred, t: int, s: NoiseSchedule, z) -> np.ndarray:
    x_t, eps_pred, z = as_tensor(x_t), as_tensor(eps_pred), as_tensor(z)
    check_same_shape("ddpm_step", x_t, eps_pred)
    check_same_shape("ddpm_step", x_t, z)
    t = s.check(t)
    if t == 1 and np.any(z != 0.0):
        raise ValueError("ddpm_step: the final step (t=1) must not add noise")
    coef = s.beta[t] / np.sqrt(1.0 - s.alpha_bar[t])
    return (x_t - coef * eps_pred) / np.sqrt(s.alpha[t]) + s.sigma[t] * z


def predict_x0(x_t, eps_pred, t: int, s: NoiseSchedule) -> np.ndarray:
    ab = s.alpha_bar[s.check(t)]
    return (as_tensor(x_t) - np.sqrt(1.0 - ab) * as_tensor(eps_pred)) / np.sqrt(ab)


def ddim_step(x_t, eps_pred, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_prev``; ``t_prev = 0`` yields x0."""
    x_t, eps_pred = as_tensor(x_t), as_tensor(eps_pred)
    check_same_shape("ddim_step", x_t, eps_pred)
    t = s.check(t)
    t_prev = s.check(t_prev, allow_zero=True)
    if t_prev > t:
        raise ValueError(f"ddim_step: t_prev={t_prev} must not exceed t={t}")
    if t_prev == t:
        return x_t.copy()
    x0_hat = predict_x0(x_t, eps_pred, t, s)
    ab_prev = s.alpha_bar[t_prev]
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_pred


def timestep_sequence(s: NoiseSchedule, sampler: str = "ddpm") -> list[int]:
    """Descending timesteps visited by a sampler name (``"ddpm"`` or ``"ddim:k"``)."""
    if sampler == "ddpm":
        return list(range(s.T, 0, -1))
    if sampler.startswith("ddim:"):
        k = int(sampler.split(":", 1)[1])
        if not 1 <= k <= s.T:
            raise ValueError(f"ddim step count {k} outside [1, {s.T}]")
        steps = np.round(np.linspace(s.T, 1, k)).astype(int)
        out = sorted(set(steps.tolist()), reverse=True)
        if len(out) != k:
            raise ValueError(f"ddim:{k} does not give {k} distinct timesteps for T={s.T}")
        return out
    raise ValueError(f"unknown sampler {sampler!r}")
