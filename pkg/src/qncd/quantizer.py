"""Fake quantization, MSE range calibration, and the quantized denoiser wrapper."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .core import Rng, as_tensor
from .denoiser import DenoiserModel, Hook, forward
from .schedule import NoiseSchedule, ddpm_step, ddim_step, timestep_sequence

if TYPE_CHECKING:
    from .intra import SmoothingPlan

ZERO_SCALE = 1e-8
DEFAULT_GRID = 100
BITWIDTHS = (4, 6, 8, 16)


class Granularity(str, Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


@dataclass(frozen=True)
class QuantParams:
    bitwidth: int
    granularity: Granularity
    scale: float | np.ndarray
    zero_point: int | np.ndarray
    qmin: int
    qmax: int
    axis: int = -1
    # mean squared reconstruction error on the calibration data, if known
    mse: Optional[float] = None

    def __post_init__(self):
        if self.bitwidth not in BITWIDTHS:
            raise ValueError(f"bitwidth {self.bitwidth} not in {BITWIDTHS}")
        if self.qmax - self.qmin != 2**self.bitwidth - 1:
            raise ValueError("qmax - qmin must equal 2**bitwidth - 1")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale must be positive")

    @property
    def symmetric(self) -> bool:
        return self.qmin < 0

    def to_dict(self) -> dict:
        def conv(v):
            return np.asarray(v).tolist()
        return {
            "bitwidth": self.bitwidth,
            "granularity": self.granularity.value,
            "scale": conv(self.scale),
            "zero_point": conv(self.zero_point),
            "qmin": self.qmin,
            "qmax": self.qmax,
            "axis": self.axis,
            "mse": self.mse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        per_ch = d["granularity"] == Granularity.PER_CHANNEL.value
        scale = np.asarray(d["scale"], dtype=float) if per_ch else float(d["scale"])
        zp = np.asarray(d["zero_point"], dtype=np.int64) if per_ch else int(d["zero_point"])
        return cls(d["bitwidth"], Granularity(d["granularity"]), scale, zp,
                   d["qmin"], d["qmax"], d.get("axis", -1), d.get("mse"))


def qrange(bitwidth: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        return -(2 ** (bitwidth - 1)), 2 ** (bitwidth - 1) - 1
    return 0, 2**bitwidth - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _bcast(v, x: np.ndarray, axis: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v
    shape = [1] * x.ndim
    shape[axis] = v.size
    return v.reshape(shape)


def quant_dequant(x, p: QuantParams) -> np.ndarray:
    """Round to the integer grid (half away from zero), saturate, and map back to reals."""
    x = as_tensor(x)
    if p.granularity is Granularity.PER_CHANNEL and x.shape[p.axis] != np.size(p.scale):
        raise ValueError(f"channel axis length {x.shape[p.axis]} != {np.size(p.scale)} scales")
    scale = _bcast(p.scale, x, p.axis)
    zp = _bcast(p.zero_point, x, p.axis)
    q = np.clip(round_half_away(x / scale) + zp, p.qmin, p.qmax)
    return (q - zp) * scale


def candidate_ranges(lo, hi, ratios: np.ndarray, bitwidth: int, symmetric: bool):
    """Scales and zero points for clip ratios ``ratios`` (shape ``[R]``) over bounds ``lo/hi`` (``[C]``).

    Returns arrays of shape ``[R, C]``.
    """
    qmin, qmax = qrange(bitwidth, symmetric)
    r = ratios[:, None]
    if symmetric:
        amax = np.maximum(np.abs(lo), np.abs(hi))[None, :]
        scale = r * amax / qmax
        zp = np.zeros_like(scale, dtype=np.int64)
    else:
        lo_r, hi_r = r * lo[None, :], r * hi[None, :]
        scale = (hi_r - lo_r) / (qmax - qmin)
        safe = np.where(scale > 0, scale, 1.0)
        zp = np.clip(qmin - round_half_away(lo_r / safe), qmin, qmax).astype(np.int64)
    degenerate = ~(scale > 0)
    scale = np.where(degenerate, ZERO_SCALE, scale)
    zp = np.where(degenerate, 0, zp)
    return scale, zp


def _as_rows(samples: Sequence[np.ndarray], granularity: Granularity, axis: int) -> np.ndarray:
    if granularity is Granularity.PER_TENSOR:
        return np.concatenate([as_tensor(s).ravel() for s in samples])[:, None]
    rows = [np.moveaxis(as_tensor(s), axis, -1) for s in samples]
    c = rows[0].shape[-1]
    return np.concatenate([r.reshape(-1, c) for r in rows], axis=0)


def mse_calibrate(samples: Sequence[np.ndarray], bitwidth: int,
                  granularity: Granularity | str = Granularity.PER_TENSOR,
                  grid_size: int = DEFAULT_GRID, symmetric: bool = False,
                  axis: int = -1) -> QuantParams:
    """Pick the clip ratio ``r in {1/grid, ..., 1}`` minimizing squared reconstruction error.

    Symmetric mode scans ``r * max|x|``; asymmetric mode scans ``r * [min, max]``
    (with the range widened to include 0). Per-channel scans each channel on its own.
    """
    if not samples:
        raise ValueError("mse_calibrate: no samples")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    granularity = Granularity(granularity)
    data = _as_rows(samples, granularity, axis)          # [N, C]
    lo = np.minimum(data.min(axis=0), 0.0)
    hi = np.maximum(data.max(axis=0), 0.0)
    ratios = np.arange(1, grid_size + 1) / grid_size
    scales, zps = candidate_ranges(lo, hi, ratios, bitwidth, symmetric)
    qmin, qmax = qrange(bitwidth, symmetric)

    sse = np.empty_like(scales)
    for i in range(ratios.size):
        q = np.clip(round_half_away(data / scales[i]) + zps[i], qmin, qmax)
        err = (q - zps[i]) * scales[i] - data
        sse[i] = (err * err).sum(axis=0)
    best = np.argmin(sse, axis=0)                         # first minimum wins ties
    cols = np.arange(data.shape[1])
    scale, zp = scales[best, cols], zps[best, cols]
    mse = float(sse[best, cols].sum() / data.size)
    if granularity is Granularity.PER_TENSOR:
        return QuantParams(bitwidth, granularity, float(scale[0]), int(zp[0]), qmin, qmax, axis, mse)
    return QuantParams(bitwidth, granularity, scale, zp, qmin, qmax, axis, mse)


# ---------------------------------------------------------------------------
# bit configuration

_BITS_RE = re.compile(r"^W(4|6|8|fp)A(4|6|8|fp)$", re.IGNORECASE)


@dataclass(frozen=True)
class BitConfig:
    """Weight / activation bitwidths; ``None`` means full precision (pass-through)."""

    weight_bits: Optional[int]
    act_bits: Optional[int]

    @classmethod
    def parse(cls, label: str) -> "BitConfig":
        m = _BITS_RE.match(label.strip())
        if not m:
            raise ValueError(f"bad bit config {label!r}; expected W(4|6|8|fp)A(4|6|8|fp)")
        conv = lambda s: None if s.lower() == "fp" else int(s)  # noqa: E731
        return cls(conv(m.group(1)), conv(m.group(2)))

    @property
    def label(self) -> str:
        w = "fp" if self.weight_bits is None else self.weight_bits
        a = "fp" if self.act_bits is None else self.act_bits
        return f"W{w}A{a}"

    @property
    def is_fp(self) -> bool:
        return self.weight_bits is None and self.act_bits is None


# ---------------------------------------------------------------------------
# calibration data


@dataclass
class CalibrationSet:
    """Sampling-trajectory states ``(t, x_t rows)`` plus the activations they produce at every hook."""

    inputs: list[tuple[int, np.ndarray]]
    activations: dict[str, list[np.ndarray]]
    timesteps: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.timesteps.size)

    def batches(self) -> list[tuple[int, np.ndarray]]:
        return self.inputs


def draw_timesteps(n: int, steps: Sequence[int], gen: np.random.Generator,
                   stratified: bool = True) -> np.ndarray:
    """Uniform timestep draws over ``steps``; stratified draws use every step ``n // len(steps)`` times."""
    steps = np.asarray(steps)
    if not stratified:
        return steps[gen.integers(0, steps.size, size=n)]
    reps, rest = divmod(n, steps.size)
    out = np.concatenate([np.repeat(steps, reps), gen.choice(steps, size=rest, replace=False)])
    return out[gen.permutation(n)]


def record_activations(model: DenoiserModel, inputs: Sequence[tuple[int, np.ndarray]],
                       hook: Optional[Hook] = None, weight_hook: Optional[Hook] = None) -> dict[str, list[np.ndarray]]:
    acts: dict[str, list[np.ndarray]] = {name: [] for name in model.hook_names()}

    def rec(name, x):
        if hook is not None:
            x = hook(name, x)
        acts[name].append(np.array(x))
        return x

    for t, x in inputs:
        forward(model, x, t, hook=rec, weight_hook=weight_hook)
    return acts


def collect_calibration(model: DenoiserModel, s: NoiseSchedule, n_samples: int, rng: Rng,
                        sampler: str = "ddpm", stratified: bool = True) -> CalibrationSet:
    """Run a full-precision trajectory of ``n_samples`` chains; each chain contributes its state
    at one uniformly drawn timestep."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    steps = timestep_sequence(s, sampler)
    ts = draw_timesteps(n_samples, steps, rng.stream("calib", "t"), stratified)
    x = rng.stream("calib", "x_T").standard_normal((n_samples, model.dim))
    inputs = []
    for i, t in enumerate(steps):
        rows = np.flatnonzero(ts == t)
        if rows.size:
            inputs.append((int(t), x[rows].copy()))
        eps = forward(model, x, t)
        if sampler == "ddpm":
            z = rng.stream("calib", "z", i).standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = ddpm_step(x, eps, t, s, z)
        else:
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            x = ddim_step(x, eps, t, t_prev, s)
    return CalibrationSet(inputs, record_activations(model, inputs), ts)


# ---------------------------------------------------------------------------
# quantized network


class MissingCalibration(ValueError):
    pass


@dataclass
class QuantizedDenoiser:
    """Fake-quantized counterpart of ``base``.

    ``model`` is the network actually executed: ``base`` itself, or its folded
    copy when a smoothing plan is attached.
    """

    base: DenoiserModel
    model: DenoiserModel
    bits: BitConfig
    weight_params: dict[str, Optional[QuantParams]]
    act_params: dict[str, Optional[QuantParams]]
    calib: CalibrationSet
    plan: Optional["SmoothingPlan"] = None
    exempt_emb_out: bool = False
    grid_size: int = DEFAULT_GRID
    qweights: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def label(self) -> str:
        return self.bits.label

    def forward(self, x, t, hook: Optional[Hook] = None,
                disabled: frozenset | set = frozenset()) -> np.ndarray:
        """Quantized forward; names in ``disabled`` (hooks or weights) run in full precision."""

        def act(name, v):
            p = self.act_params.get(name)
            if p is not None and name not in disabled:
                v = quant_dequant(v, p)
            if hook is not None:
                v = hook(name, v)
            return v

        def wq(name, w):
            if name in disabled:
                return w
            return self.qweights.get(name, w)

        return forward(self.model, x, t, hook=act, weight_hook=wq)

    __call__ = forward

    def sidecar(self) -> dict:
        doc = {
            "bits": self.label,
            "exempt_emb_out": self.exempt_emb_out,
            "grid_size": self.grid_size,
            "weights": {k: (v.to_dict() if v else None) for k, v in self.weight_params.items()},
            "activations": {k: (v.to_dict() if v else None) for k, v in self.act_params.items()},
        }
        if self.plan is not None:
            doc["smoothing"] = self.plan.to_dict()
        return doc

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n"


def quantize_model(model: DenoiserModel, calib: CalibrationSet, bits: BitConfig | str,
                   plan: Optional["SmoothingPlan"] = None, exempt_emb_out: bool = False,
                   grid_size: int = DEFAULT_GRID) -> QuantizedDenoiser:
    """Per-channel symmetric weights, per-tensor asymmetric activations, MSE ranges.

    With a smoothing plan the weights are folded first and the activation ranges
    are calibrated on the smoothed activations of the same calibration states.
    """
    if isinstance(bits, str):
        bits = BitConfig.parse(bits)
    missing = [h for h in model.hook_names() if not calib.activations.get(h)]
    if missing:
        raise MissingCalibration(f"calibration lacks hook(s): {', '.join(missing)}")

    work = model
    acts = calib.activations
    if plan is not None:
        from .intra import fold_model
        work = fold_model(plan, model)
        acts = record_activations(work, calib.inputs)

    weights = work.named_params()
    weight_params: dict[str, Optional[QuantParams]] = {}
    qweights = {}
    for name in work.weight_names():
        if bits.weight_bits is None:
            weight_params[name] = None
            continue
        p = mse_calibrate([weights[name]], bits.weight_bits, Granularity.PER_CHANNEL,
                          grid_size, symmetric=True, axis=-1)
        weight_params[name] = p
        qweights[name] = quant_dequant(weights[name], p)

    act_params: dict[str, Optional[QuantParams]] = {}
    for name in work.hook_names():
        if bits.act_bits is None or (exempt_emb_out and name.endswith(".emb_out")):
            act_params[name] = None
            continue
        act_params[name] = mse_calibrate(acts[name], bits.act_bits, Granularity.PER_TENSOR,
                                         grid_size, symmetric=False)

    return QuantizedDenoiser(model, work, bits, weight_params, act_params, calib, plan,
                             exempt_emb_out, grid_size, qweights)
