"""Run-time estimation and removal of accumulated quantization noise.

At the first step of each stage the running batch ``x`` is pushed one
diffusion step forward with fresh noise ``z1`` and fed to the quantized
network; since a well-trained network returns roughly ``z1`` there, the
residual ``eps_q(x_hat, t) - z1`` is an estimate of the quantization noise.
Its batch statistics are subtracted from every network output until the
next stage refreshes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Rng, as_tensor
from .schedule import NoiseSchedule, ddim_step, ddpm_step, single_step_diffuse, timestep_sequence

EpsFn = Callable[[np.ndarray, int], np.ndarray]
VAR_FLOOR = 1e-12


class CorrectionMode(str, Enum):
    MEAN_ONLY = "mean_only"
    MEAN_VAR = "mean_var"


@dataclass(frozen=True)
class StagePlan:
    """Sequence indices (not timesteps) at which the estimator runs."""

    indices: tuple[int, ...]
    n_steps: int

    @property
    def num_stages(self) -> int:
        return len(self.indices)

    def timesteps(self, steps: Sequence[int]) -> list[int]:
        return [steps[i] for i in self.indices]


def stage_plan(steps: Sequence[int] | int, num_stages: int) -> StagePlan:
    """Split the step sequence into ``num_stages`` near-equal contiguous blocks.

    ``num_stages == 0`` disables estimation.
    """
    n = steps if isinstance(steps, int) else len(steps)
    if not 0 <= num_stages <= n:
        raise ValueError(f"num_stages={num_stages} outside [0, {n}]")
    return StagePlan(tuple((k * n) // num_stages for k in range(num_stages)), n)


@dataclass(frozen=True)
class NoiseEstimate:
    mu_q: np.ndarray
    sigma_q: np.ndarray
    stage: int = 0
    batch_size: int = 0

    @classmethod
    def zero(cls, dim: int) -> "NoiseEstimate":
        return cls(np.zeros(dim), np.zeros(dim))


def estimate_noise(qnet: EpsFn, x_prev, t: int, s: NoiseSchedule,
                   gen: np.random.Generator, stage: int = 0) -> NoiseEstimate:
    """Diffuse ``x_prev`` one step with fresh ``z1`` and measure ``qnet(x_hat, t) - z1``."""
    x_prev = as_tensor(x_prev)
    if x_prev.ndim != 2 or x_prev.shape[0] < 1:
        raise ValueError("estimate_noise needs a nonempty [n, d] batch")
    z1 = gen.standard_normal(x_prev.shape)
    x_hat = single_step_diffuse(x_prev, t, s, z1)
    q = as_tensor(qnet(x_hat, t)) - z1
    n, d = q.shape
    if n == 1:
        # one sample: pool over dimensions
        mu = np.full(d, q.mean())
        sd = np.full(d, q.std())
    else:
        mu, sd = q.mean(axis=0), q.std(axis=0)
    return NoiseEstimate(mu, sd, stage, n)


def apply_correction(eps_tilde, est: NoiseEstimate,
                     mode: CorrectionMode | str = CorrectionMode.MEAN_ONLY) -> np.ndarray:
    """Remove the estimated noise from a batch of network outputs.

    ``mean_only`` subtracts ``mu_q``. ``mean_var`` also shrinks the spread of
    each dimension to ``sqrt(sd_obs**2 - sigma_q**2)``, treating the noise as
    independent of the clean output.
    """
    eps = as_tensor(eps_tilde)
    mode = CorrectionMode(mode)
    if eps.shape[-1] != est.mu_q.shape[0]:
        raise ValueError(f"dimension mismatch: eps {eps.shape} vs estimate {est.mu_q.shape}")
    if mode is CorrectionMode.MEAN_ONLY or not np.any(est.sigma_q):
        return eps - est.mu_q
    m = eps.mean(axis=0)
    sd_obs = eps.std(axis=0)
    target = np.sqrt(np.maximum(sd_obs**2 - est.sigma_q**2, VAR_FLOOR))
    ratio = np.divide(target, sd_obs, out=np.ones_like(sd_obs), where=sd_obs > 0)
    return (eps - m) * ratio + (m - est.mu_q)


@dataclass
class StepRecord:
    index: int
    t: int
    mean: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    is_estimation: bool = False
    estimate: Optional[NoiseEstimate] = None


@dataclass
class SampleRun:
    samples: np.ndarray
    records: list[StepRecord] = field(default_factory=list)
    eval_count: int = 0
    steps: list[int] = field(default_factory=list)
    # state entering a step, keyed by step index (only the requested ones)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)


def probe_timestep(t: int, s: NoiseSchedule) -> int:
    """Timestep at which a state entering step ``t`` is re-diffused and probed."""
    return min(int(t) + 1, s.T)


def sample_loop(eps_fn: EpsFn, s: NoiseSchedule, n: int, dim: int, rng: Rng,
                sampler: str = "ddpm", plan: Optional[StagePlan] = None,
                mode: CorrectionMode | str = CorrectionMode.MEAN_ONLY,
                keep_eps: bool = True, snapshot_at: Sequence[int] = ()) -> SampleRun:
    """Ancestral (ddpm) or deterministic (ddim:k) sampling with optional staged correction.

    Random draws are keyed by purpose and step index, so two runs with the same
    ``rng`` seed share ``x_T`` and every step's noise.
    """
    steps = timestep_sequence(s, sampler)
    if plan is not None and plan.n_steps != len(steps):
        raise ValueError(f"stage plan covers {plan.n_steps} steps, sampler has {len(steps)}")
    est_at = {i: k for k, i in enumerate(plan.indices)} if plan else {}
    x = rng.stream("x_T").standard_normal((n, dim))
    est: Optional[NoiseEstimate] = None
    evals = 0
    records = []
    snaps = {}
    for i, t in enumerate(steps):
        if i in snapshot_at:
            snaps[i] = x.copy()
        if i in est_at:
            # x is the output of the step at t + 1; push it back up one step and probe there
            est = estimate_noise(eps_fn, x, probe_timestep(t, s), s, rng.stream("probe", i),
                                 stage=est_at[i])
            evals += 1
        eps = as_tensor(eps_fn(x, t))
        evals += 1
        if est is not None:
            eps = apply_correction(eps, est, mode)
        if sampler == "ddpm":
            z = rng.stream("z", i).standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = ddpm_step(x, eps, t, s, z)
        else:
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            x = ddim_step(x, eps, t, t_prev, s)
        records.append(StepRecord(i, t, x.mean(axis=0), x.std(axis=0),
                                  eps if keep_eps else np.empty(0), i in est_at,
                                  est if i in est_at else None))
    return SampleRun(x, records, evals, steps, snaps)


def corrected_sample_loop(qnet: EpsFn, s: NoiseSchedule, plan: Optional[StagePlan], n: int,
                          dim: int, rng: Rng, mode: CorrectionMode | str = CorrectionMode.MEAN_ONLY,
                          sampler: str = "ddpm") -> SampleRun:
    return sample_loop(qnet, s, n, dim, rng, sampler, plan, mode)
