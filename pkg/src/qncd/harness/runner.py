"""Experiment orchestration: train-or-load, calibrate, quantize, sample paired runs, write artifacts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import Rng
from ..denoiser import (
    DenoiserModel, GaussianMixture, TrainOptions, inject_imbalance, init_model, load_model,
    model_from_dict, model_to_dict, save_model, train,
)
from ..inter import CorrectionMode, SampleRun, StepRecord, sample_loop, stage_plan
from ..intra import apply_intra
from ..metrics import (
    LAYERS_HEADER, SUMMARY_HEADER, cosine, export_csv, layer_error_profile, read_csv,
    sliced_wasserstein, trajectory_rows,
)
from ..quantizer import BitConfig, QuantizedDenoiser, collect_calibration, quantize_model
from ..schedule import NoiseSchedule, linear_schedule, timestep_sequence
from .config import ExperimentConfig

log = logging.getLogger(__name__)

VARIANTS = ("naive", "intra", "inter", "qncd")
SWD_NOTE = "swd_to_fp: sliced Wasserstein-1 distance to full-precision samples (stand-in for FID)"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


@dataclass
class Variant:
    name: str
    intra: bool
    stages: int


def variant_for(cfg: ExperimentConfig) -> Variant:
    intra, stages = cfg.intra.enabled, cfg.inter.num_stages
    name = {(False, False): "naive", (True, False): "intra",
            (False, True): "inter", (True, True): "qncd"}[(intra, stages > 0)]
    return Variant(name, intra, stages)


def ablation_variants(cfg: ExperimentConfig) -> list[Variant]:
    n = cfg.inter.num_stages or 4
    return [Variant("naive", False, 0), Variant("intra", True, 0),
            Variant("inter", False, n), Variant("qncd", True, n)]


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    c = cfg.schedule
    return linear_schedule(c.T, c.beta_start, c.beta_end, c.variance)


def build_gmm(cfg: ExperimentConfig) -> GaussianMixture:
    return GaussianMixture(np.array(cfg.data.weights), np.array(cfg.data.means), np.array(cfg.data.stds))


_MODEL_CACHE: dict[str, dict] = {}


def train_or_load(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> DenoiserModel:
    """The trained (pre-injection) network; cached per model-relevant config hash."""
    if cfg.model.weights_path:
        return load_model(cfg.model.weights_path)
    key = cfg.model_hash()
    if key not in _MODEL_CACHE:
        cached = out_dir / "model.json" if out_dir else None
        meta = out_dir / "model.meta.json" if out_dir else None
        if cached and cached.is_file() and meta.is_file() and json.loads(meta.read_text()).get("model_hash") == key:
            model = load_model(cached)
        else:
            m = cfg.model
            model = init_model(len(cfg.data.means[0]), m.hidden, m.emb_dim, m.n_blocks, m.styles,
                               m.init_seed, m.groups)
            t = cfg.train
            model = train(model, build_gmm(cfg), build_schedule(cfg),
                          TrainOptions(lr=t.lr, batch_size=t.batch_size, iterations=t.iterations, seed=t.seed)).model
        _MODEL_CACHE[key] = model_to_dict(model)
    model = model_from_dict(_MODEL_CACHE[key])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(model, out_dir / "model.json")
        (out_dir / "model.meta.json").write_text(json.dumps({"model_hash": key}) + "\n")
    return model


def reference_model(cfg: ExperimentConfig, trained: DenoiserModel) -> DenoiserModel:
    """The full-precision network every variant is compared against (after imbalance injection)."""
    m = cfg.model
    if m.inject_factor == 1.0 or m.inject_channels == 0:
        return trained
    return inject_imbalance(trained, m.inject_factor, m.inject_channels, m.inject_seed)[0]


def build_quantized(cfg: ExperimentConfig, fp: DenoiserModel, s: NoiseSchedule, seed: int,
                    intra: bool) -> QuantizedDenoiser:
    calib = collect_calibration(fp, s, cfg.quant.calib_samples, Rng(seed).child("calib"),
                                sampler=cfg.sampler.kind)
    q = quantize_model(fp, calib, cfg.quant.bits, exempt_emb_out=cfg.quant.exempt_emb_out,
                       grid_size=cfg.quant.grid_size)
    return apply_intra(q, s) if intra else q


def _merge(runs: list[SampleRun]) -> SampleRun:
    """Pool per-batch runs into one record stream (batch-size weighted moments)."""
    if len(runs) == 1:
        return runs[0]
    merged = []
    for k in range(len(runs[0].records)):
        recs = [r.records[k] for r in runs]
        ns = np.array([r.samples.shape[0] for r in runs], dtype=float)[:, None]
        means = np.array([r.mean for r in recs])
        m = (ns * means).sum(0) / ns.sum()
        second = (ns * (np.array([r.std for r in recs]) ** 2 + means**2)).sum(0) / ns.sum()
        merged.append(StepRecord(recs[0].index, recs[0].t, m, np.sqrt(np.maximum(second - m * m, 0.0)),
                                 np.concatenate([r.eps for r in recs]), recs[0].is_estimation,
                                 recs[0].estimate))
    return SampleRun(np.concatenate([r.samples for r in runs]), merged,
                     runs[0].eval_count, runs[0].steps)


def sample_variant(cfg: ExperimentConfig, eps_fn, s: NoiseSchedule, seed: int, stages: int) -> SampleRun:
    steps = timestep_sequence(s, cfg.sampler.kind)
    plan = stage_plan(steps, stages) if stages else None
    dim = len(cfg.data.means[0])
    runs = []
    for b in range(cfg.run.n_samples // cfg.run.batch_size):
        rng = Rng(seed).child("sample", b)
        runs.append(sample_loop(eps_fn, s, cfg.run.batch_size, dim, rng, cfg.sampler.kind,
                                plan, CorrectionMode(cfg.inter.mode)))
    return _merge(runs)


@dataclass
class RunResult:
    run_id: str
    variant: str
    seed: int
    bits: str
    intra: bool
    stages: int
    mode: str
    run: SampleRun
    qmodel: Optional[QuantizedDenoiser] = None
    summary: list = field(default_factory=list)


def run_id_for(cfg: ExperimentConfig, variant: str, seed: int) -> str:
    return f"{variant}-s{seed}-{cfg.hash()}"


def summary_row(res: RunResult, fp: SampleRun, cfg: ExperimentConfig) -> list:
    swd = sliced_wasserstein(res.run.samples, fp.samples, cfg.run.swd_projections, Rng(res.seed))
    final_cos = cosine(fp.records[-1].eps, res.run.records[-1].eps)
    return [res.run_id, res.bits, res.intra, res.stages, res.mode if res.stages else "none",
            res.seed, swd, final_cos, res.run.eval_count]


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, e) from e


PLOT_SCRIPT = """\
# gnuplot script: batch mean / std of x_t per sampling step, one curve per run.
# {note}
set datafile separator ","
set key autotitle columnhead
set xlabel "step index"
set multiplot layout 2,1
set ylabel "mean_0"
plot for [id in RUNS] "trajectory.csv" using (strcol(1) eq id ? $2 : NaN):4 with lines title id
set ylabel "std_0"
plot for [id in RUNS] "trajectory.csv" using (strcol(1) eq id ? $2 : NaN):(column(4 + {dim})) with lines title id
unset multiplot
"""


def run_experiment(cfg: ExperimentConfig, variants: Optional[Sequence[Variant]] = None,
                   out_dir: Optional[Path | str] = None, write: bool = True) -> list[RunResult]:
    """Run the FP reference and each variant for every seed; write CSVs and sidecars.

    FP and quantized runs of a seed share every random draw, so their
    differences come from quantization (and correction) alone.
    """
    out = Path(out_dir or cfg.run.out_dir)
    variants = list(variants) if variants is not None else [variant_for(cfg)]
    s = _stage("schedule", build_schedule, cfg)
    trained = _stage("train", train_or_load, cfg, out if write else None)
    fp_model = reference_model(cfg, trained)
    bits = BitConfig.parse(cfg.quant.bits).label
    mode = CorrectionMode(cfg.inter.mode).value
    dim = fp_model.dim

    results: list[RunResult] = []
    traj, summary, layers = [], [], []
    manifest = {"config_hash": cfg.hash(), "note": SWD_NOTE, "runs": []}
    samples = {}
    sidecars = {}
    for seed in cfg.run.seeds:
        fp_run = _stage("sample-fp", sample_variant, cfg, fp_model, s, seed, 0)
        fp_res = RunResult(run_id_for(cfg, "fp", seed), "fp", seed, "WfpAfp", False, 0, mode, fp_run)
        fp_res.summary = [fp_res.run_id, "WfpAfp", False, 0, "none", seed, 0.0, 1.0, fp_run.eval_count]
        results.append(fp_res)
        traj += trajectory_rows(fp_res.run_id, fp_run)
        summary.append(fp_res.summary)
        samples[fp_res.run_id] = fp_run.samples
        manifest["runs"].append({"run_id": fp_res.run_id, "variant": "fp", "seed": seed,
                                 "bits": "WfpAfp", "intra": False, "stages": 0, "mode": "none",
                                 "eval_count": fp_run.eval_count})

        quantized = {}
        # per-hook profile at the step nearest T/2
        probe_idx = int(np.argmin(np.abs(np.array(fp_run.steps) - s.T // 2)))
        probe_x = _stage("probe", _probe_batch, cfg, fp_model, s, seed, probe_idx)
        probe_tt = fp_run.steps[probe_idx]
        for v in variants:
            if v.intra not in quantized:
                quantized[v.intra] = _stage("quantize", build_quantized, cfg, fp_model, s, seed, v.intra)
            q = quantized[v.intra]
            run = _stage(f"sample-{v.name}", sample_variant, cfg, q, s, seed, v.stages)
            res = RunResult(run_id_for(cfg, v.name, seed), v.name, seed, bits, v.intra, v.stages, mode, run, q)
            res.summary = _stage("metrics", summary_row, res, fp_run, cfg)
            results.append(res)
            traj += trajectory_rows(res.run_id, run, fp_run)
            summary.append(res.summary)
            for le in layer_error_profile(fp_model, q, probe_x, probe_tt):
                layers.append([res.run_id, le.hook, le.cosine, le.mse])
            samples[res.run_id] = run.samples
            sidecars[res.run_id] = q.sidecar_json()
            manifest["runs"].append({"run_id": res.run_id, "variant": v.name, "seed": seed, "bits": bits,
                                     "intra": v.intra, "stages": v.stages,
                                     "mode": mode if v.stages else "none", "eval_count": run.eval_count})

    if write:
        _stage("write", _write_artifacts, out, cfg, dim, traj, summary, layers, manifest, samples, sidecars)
    return results


def _probe_batch(cfg: ExperimentConfig, fp_model: DenoiserModel, s: NoiseSchedule, seed: int,
                 idx: int) -> np.ndarray:
    """The full-precision sampler state entering step ``idx``, on a small dedicated batch."""
    run = sample_loop(fp_model, s, cfg.run.probe_size, fp_model.dim, Rng(seed).child("probe"),
                      cfg.sampler.kind, keep_eps=False, snapshot_at=(idx,))
    return run.snapshots[idx]


def _write_artifacts(out: Path, cfg: ExperimentConfig, dim: int, traj, summary, layers, manifest,
                     samples, sidecars) -> None:
    out.mkdir(parents=True, exist_ok=True)
    partial = out / "PARTIAL"
    partial.write_text("artifact writing in progress\n")
    export_csv(out, dim, traj, summary, layers)
    (out / "config.toml").write_text(cfg.dumps(), encoding="utf-8")
    (out / "runs.json").write_text(json.dumps(manifest, indent=1) + "\n")
    np.savez(out / "samples.npz", **{k: v for k, v in sorted(samples.items())})
    params_dir = out / "params"
    params_dir.mkdir(exist_ok=True)
    for rid, text in sorted(sidecars.items()):
        (params_dir / f"{rid}.json").write_text(text)
    run_ids = " ".join(r["run_id"] for r in manifest["runs"])
    (out / "plot.gp").write_text(f'RUNS = "{run_ids}"\n' + PLOT_SCRIPT.format(note=SWD_NOTE, dim=dim))
    partial.unlink()


def regenerate_summary(out_dir: Path | str) -> tuple[list[list[str]], list[list[str]]]:
    """Recompute summary rows from persisted samples and trajectories.

    Returns ``(regenerated, on_disk)`` as string rows.
    """
    from ..metrics import fmt
    from .config import load

    out = Path(out_dir)
    cfg = load(out / "config.toml")
    manifest = json.loads((out / "runs.json").read_text())
    samples = np.load(out / "samples.npz")
    _, traj = read_csv(out / "trajectory.csv")
    last_cos = {}
    for row in traj:
        last_cos[row[0]] = row[-2]
    fp_ids = {r["seed"]: r["run_id"] for r in manifest["runs"] if r["variant"] == "fp"}
    rows = []
    for r in manifest["runs"]:
        if r["variant"] == "fp":
            swd, cos = 0.0, 1.0
        else:
            swd = sliced_wasserstein(samples[r["run_id"]], samples[fp_ids[r["seed"]]],
                                     cfg.run.swd_projections, Rng(r["seed"]))
            cos = float(last_cos[r["run_id"]])
        rows.append([fmt(v) for v in [r["run_id"], r["bits"], r["intra"], r["stages"], r["mode"],
                                      r["seed"], swd, cos, r["eval_count"]]])
    _, on_disk = read_csv(out / "summary.csv")
    return rows, on_disk
