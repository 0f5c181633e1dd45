"""Diagnostics: SNR, cosine similarity, sliced Wasserstein, per-hook error profiles, CSV export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Rng, as_tensor, check_same_shape, cosine
from .denoiser import DenoiserModel, forward
from .inter import SampleRun

SNR_INF = math.inf


def snr(eps_fp, eps_q) -> float:
    """``10 log10(|eps_fp|^2 / |eps_q - eps_fp|^2)`` in dB; identical inputs give ``inf``."""
    a, b = as_tensor(eps_fp), as_tensor(eps_q)
    check_same_shape("snr", a, b)
    sig = float((a * a).sum())
    if sig == 0.0:
        raise ValueError("snr: reference signal is zero")
    noise = float(((b - a) ** 2).sum())
    if noise == 0.0:
        return SNR_INF
    return 10.0 * math.log10(sig / noise)


def cosine_similarity(eps_fp, eps_q) -> float:
    return cosine(eps_fp, eps_q)


def wasserstein_1d(u: np.ndarray, v: np.ndarray) -> float:
    """W1 between two 1-D empirical distributions via their quantile functions."""
    u, v = np.sort(u), np.sort(v)
    if u.size == v.size:
        return float(np.abs(u - v).mean())
    # integrate |F_u^-1 - F_v^-1| over the merged grid of cdf levels
    levels = np.union1d(np.arange(1, u.size + 1) / u.size, np.arange(1, v.size + 1) / v.size)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - widths / 2
    qu = u[np.minimum((mid * u.size).astype(int), u.size - 1)]
    qv = v[np.minimum((mid * v.size).astype(int), v.size - 1)]
    return float((widths * np.abs(qu - qv)).sum())


def random_directions(dim: int, n_projections: int, gen: np.random.Generator) -> np.ndarray:
    w = gen.standard_normal((n_projections, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 128, rng: Rng | np.random.Generator | int = 0) -> float:
    """Mean W1 distance of the two point clouds along random unit directions."""
    a, b = np.atleast_2d(as_tensor(a)), np.atleast_2d(as_tensor(b))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("sliced_wasserstein needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if isinstance(rng, int):
        rng = Rng(rng)
    gen = rng.stream("swd") if isinstance(rng, Rng) else rng
    dirs = random_directions(a.shape[1], n_projections, gen)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))


# ---------------------------------------------------------------------------
# per-hook profiles


@dataclass
class LayerError:
    hook: str
    cosine: float
    mse: float


def _recorder(store: dict, smooth: Optional[dict] = None):
    def rec(name, x):
        v = np.array(x)
        if smooth and name in smooth:
            v = v * smooth[name]
        store[name] = v
        return x
    return rec


def layer_error_profile(base: DenoiserModel, qmodel, x, t,
                        disabled: frozenset | set = frozenset()) -> list[LayerError]:
    """Compare the tensors seen at every hook (in execution order) plus the final output.

    Smoothed activations of ``qmodel`` are rescaled by ``S`` so both sides are in
    the units of the unsmoothed network.
    """
    work = getattr(qmodel, "model", qmodel)
    if work.architecture_hash() != base.architecture_hash():
        raise ValueError("architecture mismatch between base and quantized model")
    smooth = {f"blocks.{i}.fused": b.smooth for i, b in enumerate(work.blocks) if b.smooth is not None}
    ref: dict = {}
    got: dict = {}
    out_ref = forward(base, x, t, hook=_recorder(ref))
    if hasattr(qmodel, "act_params"):
        out_q = qmodel.forward(x, t, hook=_recorder(got, smooth), disabled=disabled)
    else:
        out_q = forward(work, x, t, hook=_recorder(got, smooth))
    rows = []
    for name in base.hook_names() + ["output"]:
        a, b = (out_ref, out_q) if name == "output" else (ref[name], got[name])
        rows.append(LayerError(name, _safe_cos(a, b), float(np.mean((a - b) ** 2))))
    return rows


def _safe_cos(a, b) -> float:
    if not np.any(a) and not np.any(b):
        return 1.0
    if np.array_equal(a, b):
        return 1.0
    return cosine(a, b)


def channel_range_ratio(acts: Sequence[np.ndarray]) -> float:
    """Largest per-channel max|x| over the median per-channel max|x|."""
    amp = np.max(np.abs(np.concatenate([np.atleast_2d(a) for a in acts], axis=0)), axis=0)
    return float(amp.max() / np.median(amp))


# ---------------------------------------------------------------------------
# CSV export


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def trajectory_header(dim: int) -> list[str]:
    return (["run_id", "step_index", "t"] + [f"mean_{k}" for k in range(dim)]
            + [f"std_{k}" for k in range(dim)] + ["snr_db", "cosine", "is_estimation_step"])


SUMMARY_HEADER = ["run_id", "config_label", "intra_enabled", "inter_stages", "correction_mode",
                  "seed", "swd_to_fp", "final_cosine", "eval_count"]
LAYERS_HEADER = ["run_id", "hook_path", "cosine", "mse"]


def trajectory_rows(run_id: str, run: SampleRun, reference: Optional[SampleRun] = None) -> list[list]:
    rows = []
    for k, rec in enumerate(run.records):
        if reference is not None:
            ref_eps = reference.records[k].eps
            s_db, c = snr(ref_eps, rec.eps), cosine(ref_eps, rec.eps)
        else:
            s_db, c = SNR_INF, 1.0
        rows.append([run_id, rec.index, rec.t, *rec.mean.tolist(), *rec.std.tolist(), s_db, c,
                     rec.is_estimation])
    return rows


def write_csv(path: Path | str, header: list[str], rows: Iterable[list]) -> None:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def read_csv(path: Path | str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def export_csv(out_dir: Path | str, dim: int, trajectory: list[list], summary: list[list],
               layers: list[list]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.csv",
        "summary": out / "summary.csv",
        "layers": out / "layers.csv",
    }
    write_csv(paths["trajectory"], trajectory_header(dim), trajectory)
    write_csv(paths["summary"], SUMMARY_HEADER, summary)
    write_csv(paths["layers"], LAYERS_HEADER, layers)
    return paths
