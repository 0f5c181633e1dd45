"""Command line entry point: ``qncd {train,calibrate,run,ablate,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..metrics import read_csv
from .config import ConfigError, ExperimentConfig, load
from .runner import (
    StageError, ablation_variants, build_quantized, build_schedule, reference_model, regenerate_summary,
    run_experiment, train_or_load, variant_for,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qncd", description="Quantization noise correction lab for toy diffusion samplers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train (or load) the toy denoiser and save it to OUT/model.json",
        "calibrate": "collect calibration data and write quantization parameters",
        "run": "run FP plus the configured variant; write CSVs and sidecars",
        "ablate": "run FP plus naive / intra / inter / qncd variants",
        "report": "print the effective config and, if present, the summary in OUT",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h, description=h)
        sp.add_argument("--config", type=Path, help="TOML config (defaults are used if omitted)")
        sp.add_argument("--seed", type=int, help="run only this seed")
        sp.add_argument("--out", type=Path, help="output directory (overrides run.out_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config is not None else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return cfg.replace(run=overrides) if overrides else cfg


def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def _cmd_train(cfg: ExperimentConfig, out: Path) -> None:
    train_or_load(cfg, out)
    print(f"model written to {out / 'model.json'}")


def _cmd_calibrate(cfg: ExperimentConfig, out: Path) -> None:
    s = build_schedule(cfg)
    fp = reference_model(cfg, train_or_load(cfg, out))
    seed = cfg.run.seeds[0]
    q = build_quantized(cfg, fp, s, seed, cfg.intra.enabled)
    params = out / "params"
    params.mkdir(parents=True, exist_ok=True)
    path = params / f"calib-{q.label}-s{seed}-{cfg.hash()}.json"
    path.write_text(q.sidecar_json(), encoding="utf-8")
    print(f"quantization parameters written to {path}")


def _cmd_run(cfg: ExperimentConfig, out: Path, ablate: bool) -> None:
    variants = ablation_variants(cfg) if ablate else [variant_for(cfg)]
    run_experiment(cfg, variants, out)
    header, rows = read_csv(out / "summary.csv")
    _print_table(header, rows)


def _cmd_report(cfg: ExperimentConfig, out: Path) -> int:
    print("# effective configuration (defaults filled in)")
    print(cfg.dumps())
    summary = out / "summary.csv"
    if not summary.is_file():
        print(f"# no results in {out}")
        return EXIT_OK
    regenerated, on_disk = regenerate_summary(out)
    header, _ = read_csv(summary)
    print(f"# results in {out} (swd_to_fp: sliced Wasserstein-1 to FP samples)")
    _print_table(header, on_disk)
    if regenerated != on_disk:
        print("# WARNING: summary regenerated from persisted samples differs from summary.csv")
        return EXIT_RUNTIME
    print("# summary regenerated from persisted samples matches")
    return EXIT_OK


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.run.out_dir)
    try:
        if args.command == "train":
            _cmd_train(cfg, out)
        elif args.command == "calibrate":
            _cmd_calibrate(cfg, out)
        elif args.command in ("run", "ablate"):
            _cmd_run(cfg, out, args.command == "ablate")
        else:
            return _cmd_report(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
