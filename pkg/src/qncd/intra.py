"""Embedding-derived channel smoothing.

For every resblock a static per-channel divisor ``S`` is derived from the
timestep embedding alone (all ``t`` in ``1..T``). The fused activation is
divided by ``S`` before it is quantized, and the rows of ``w_out`` are
multiplied by ``S``, so ``(f / S) @ (S * W) == f @ W`` in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserModel, FusionStyle, ResBlock, sinusoidal_embedding
from .quantizer import QuantizedDenoiser, quantize_model
from .schedule import NoiseSchedule

S_FLOOR = 1e-3
STD_GUARD = 1e-5


def _embedding_projection(block: ResBlock, s: NoiseSchedule, max_period: float) -> np.ndarray:
    ts = np.arange(1, s.T + 1)
    emb = sinusoidal_embedding(ts, block.emb_layer.shape[0], max_period)
    return emb @ block.emb_layer + block.b_emb  # [T, emb_out]


def compute_s_scaleshift(block: ResBlock, s: NoiseSchedule, max_period: float = 10000.0,
                         floor: float = S_FLOOR) -> np.ndarray:
    """``S = mean_t |1 + scale_t|``, floored."""
    if block.style is not FusionStyle.SCALE_SHIFT:
        raise ValueError("compute_s_scaleshift needs a scale_shift block")
    scale = _embedding_projection(block, s, max_period)[:, : block.width]
    return np.maximum(np.abs(1.0 + scale).mean(axis=0), floor)


def compute_s_groupnorm(block: ResBlock, s: NoiseSchedule, max_period: float = 10000.0,
                        floor: float = S_FLOOR) -> np.ndarray:
    """``S = mean_t |groupnorm(emb_proj_t) * gamma|``, floored.

    The embedding projection is normalized with the same channel groups the
    block's group norm uses; a zero group std is replaced by ``STD_GUARD``.
    """
    if block.style is not FusionStyle.ADD_GROUPNORM:
        raise ValueError("compute_s_groupnorm needs an add_groupnorm block")
    p = _embedding_projection(block, s, max_period)
    T, c = p.shape
    pg = p.reshape(T, block.groups, c // block.groups)
    mu = pg.mean(axis=-1, keepdims=True)
    sd = pg.std(axis=-1, keepdims=True)
    sd = np.where(sd == 0.0, STD_GUARD, sd)
    normed = ((pg - mu) / sd).reshape(T, c)
    return np.maximum(np.abs(normed * block.norm_gamma).mean(axis=0), floor)


def compute_s(block: ResBlock, s: NoiseSchedule, max_period: float = 10000.0,
              floor: float = S_FLOOR) -> np.ndarray:
    if block.style is FusionStyle.SCALE_SHIFT:
        return compute_s_scaleshift(block, s, max_period, floor)
    return compute_s_groupnorm(block, s, max_period, floor)


@dataclass
class SmoothingPlan:
    factors: dict[int, np.ndarray]
    styles: dict[int, FusionStyle]
    floor: float = S_FLOOR

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "blocks": {str(i): {"style": self.styles[i].value, "S": self.factors[i].tolist()}
                       for i in sorted(self.factors)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingPlan":
        blocks = d["blocks"]
        return cls({int(i): np.asarray(b["S"], dtype=float) for i, b in blocks.items()},
                   {int(i): FusionStyle(b["style"]) for i, b in blocks.items()},
                   d["floor"])


def smoothing_plan(model: DenoiserModel, s: NoiseSchedule, floor: float = S_FLOOR) -> SmoothingPlan:
    factors = {i: compute_s(b, s, model.max_period, floor) for i, b in enumerate(model.blocks)}
    return SmoothingPlan(factors, {i: b.style for i, b in enumerate(model.blocks)}, floor)


def fold(S: np.ndarray, block: ResBlock) -> ResBlock:
    if block.smooth is not None:
        raise ValueError("block is already folded")
    if S.shape != (block.w_out.shape[0],):
        raise ValueError(f"S has shape {S.shape}, w_out expects ({block.w_out.shape[0]},)")
    out = block.copy()
    out.w_out = block.w_out * S[:, None]
    out.smooth = np.array(S, dtype=float)
    return out


def unfold(block: ResBlock) -> ResBlock:
    if block.smooth is None:
        raise ValueError("block is not folded")
    out = block.copy()
    out.w_out = block.w_out / block.smooth[:, None]
    out.smooth = None
    return out


def fold_model(plan: SmoothingPlan, model: DenoiserModel) -> DenoiserModel:
    out = model.copy()
    out.blocks = [fold(plan.factors[i], b) if i in plan.factors else b
                  for i, b in enumerate(out.blocks)]
    return out


def unfold_model(model: DenoiserModel) -> DenoiserModel:
    out = model.copy()
    out.blocks = [unfold(b) if b.smooth is not None else b for b in out.blocks]
    return out


def apply_intra(qmodel: QuantizedDenoiser, s: NoiseSchedule, floor: float = S_FLOOR) -> QuantizedDenoiser:
    """Re-quantize ``qmodel.base`` with smoothing: fold S into weights, re-calibrate activations."""
    if qmodel.plan is not None or any(b.smooth is not None for b in qmodel.base.blocks):
        raise ValueError("model is already smoothed")
    plan = smoothing_plan(qmodel.base, s, floor)
    return quantize_model(qmodel.base, qmodel.calib, qmodel.bits, plan=plan,
                          exempt_emb_out=qmodel.exempt_emb_out, grid_size=qmodel.grid_size)
