"""Desk-scale lab for post-training quantization noise correction in diffusion samplers."""

from .core import Rng, ShapeError
from .schedule import NoiseSchedule, linear_schedule
from .denoiser import DenoiserModel, FusionStyle, GaussianMixture, init_model
from .quantizer import BitConfig, QuantParams, QuantizedDenoiser, mse_calibrate, quant_dequant, quantize_model
from .intra import SmoothingPlan, apply_intra, smoothing_plan
from .inter import CorrectionMode, NoiseEstimate, StagePlan, estimate_noise, sample_loop, stage_plan

__version__ = "0.1.0"

__all__ = [
    "Rng", "ShapeError", "NoiseSchedule", "linear_schedule", "DenoiserModel", "FusionStyle",
    "GaussianMixture", "init_model", "BitConfig", "QuantParams", "QuantizedDenoiser",
    "mse_calibrate", "quant_dequant", "quantize_model", "SmoothingPlan", "apply_intra",
    "smoothing_plan", "CorrectionMode", "NoiseEstimate", "StagePlan", "estimate_noise",
    "sample_loop", "stage_plan",
]
