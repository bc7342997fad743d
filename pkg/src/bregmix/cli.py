"""Command-line front end.

Subcommands:

* ``bregmix run <config.json> [--out DIR] [--runs N] [--seed S]`` executes
  an experiment and writes ``mse.csv``, ``weights_mean.csv``,
  ``weights_moment.csv``, ``diagnostics.csv`` and ``manifest.json``.
* ``bregmix compare <a.json> <b.json> ...`` runs configurations that differ
  only in the combiner and writes ``compare.csv`` plus a printed ranking.
* ``bregmix validate <config.json>`` checks a configuration and prints the
  fully resolved form without running anything.

Exit codes: 0 success, 2 configuration error, 3 too many diverged runs.
Floats in CSV output carry 17 significant digits so values round-trip
exactly.  ``BREGMIX_THREADS`` caps the worker count (0 = auto).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, harness
from .exceptions import ConfigError, EnsembleDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]):
    rows = len(columns[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in range(rows):
            writer.writerow([_fmt(col[r]) for col in columns])
    return {"rows": rows + 1, "columns": len(header)}


def _load_config(path: str) -> harness.ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([(path, f"cannot read config: {exc}")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([(path, f"malformed JSON: {exc}")]) from None
    return harness.ExperimentConfig.from_dict(raw)


def _print_config_errors(exc: ConfigError):
    for path, msg in exc.errors:
        where = f"{path}: " if path else ""
        print(f"error: {where}{msg}", file=sys.stderr)


def write_curves(curves: harness.CurveSet, outdir: Path) -> dict:
    """Write the four CSV artifacts; returns per-file row/column counts."""
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    m = curves.mse_constituents.shape[1]

    header = ["t", "mse_mixture"] + [f"mse_c{i + 1}" for i in range(m)]
    cols = [curves.t, curves.mse_mixture] + [
        curves.mse_constituents[:, i] for i in range(m)]
    if curves.theory_mse is not None:
        header.append("mse_theory")
        cols.append(curves.theory_mse)
    files["mse.csv"] = _write_csv(outdir / "mse.csv", header, cols)

    k = curves.weights_mean.shape[1]
    header = ["t"] + [f"qa_{i + 1}" for i in range(k)]
    cols = [curves.t] + [curves.weights_mean[:, i] for i in range(k)]
    if curves.theory_weights_mean is not None:
        header += [f"theory_qa_{i + 1}" for i in range(k)]
        cols += [curves.theory_weights_mean[:, i] for i in range(k)]
    files["weights_mean.csv"] = _write_csv(outdir / "weights_mean.csv",
                                           header, cols)

    header = ["t"] + [f"Qa_{i}_{j}" for i, j in curves.moment_labels]
    cols = [curves.t] + [curves.moments_empirical[:, c]
                         for c in range(len(curves.moment_labels))]
    if curves.theory_moments is not None:
        header += [f"theory_Qa_{i}_{j}" for i, j in curves.moment_labels]
        cols += [curves.theory_moments[:, c]
                 for c in range(len(curves.moment_labels))]
    files["weights_moment.csv"] = _write_csv(outdir / "weights_moment.csv",
                                             header, cols)

    header = ["t", "linearization_diff", "quotient_diff", "saturation_count"]
    cols = [curves.t, curves.lin_diag, curves.quot_diag, curves.saturation]
    files["diagnostics.csv"] = _write_csv(outdir / "diagnostics.csv",
                                          header, cols)
    return files


def cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.runs is not None:
        config = dataclasses.replace(config, runs=args.runs)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    outdir = Path(args.out) if args.out else Path(config.output.directory)

    start = time.monotonic()
    curves = harness.run_ensemble(config)
    elapsed = time.monotonic() - start

    files = write_curves(curves, outdir)
    manifest = {
        "tool": "bregmix",
        "version": __version__,
        "seed": config.seed,
        "wall_clock_seconds": elapsed,
        "runs": config.runs,
        "included_runs": curves.included_runs,
        "diverged_runs": curves.diverged_runs,
        "config": curves.resolved,
        "files": files,
    }
    manifest_path = outdir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {', '.join(sorted(files))} and manifest.json to {outdir}")
    print(f"{curves.included_runs} runs averaged "
          f"({curves.diverged_runs} diverged), {elapsed:.1f}s")
    return EXIT_OK


def _comparable_key(config: harness.ExperimentConfig):
    return (config.seed, config.runs, config.horizon, config.signal,
            config.constituents)


def cmd_compare(args) -> int:
    configs = [_load_config(p) for p in args.configs]
    if len(configs) < 2:
        raise ConfigError([("", "compare needs at least two configs")])
    key = _comparable_key(configs[0])
    for path, cfg in zip(args.configs[1:], configs[1:]):
        if _comparable_key(cfg) != key:
            raise ConfigError([(path, "not comparable: configs may differ "
                                "only in the mixture section")])

    rows = []
    for path, cfg in zip(args.configs, configs):
        curves = harness.run_ensemble(cfg)
        final_mse = harness.final_window_mean(curves.mse_mixture)
        iters = harness.iterations_to_90pct(curves)
        rows.append({
            "algorithm": cfg.mixture.algorithm,
            "mu": cfg.mixture.mu,
            "u": cfg.mixture.u if cfg.mixture.u is not None else float("nan"),
            "final_window_mse": final_mse,
            "iterations_to_90pct_weight": iters,
            "path": path,
        })

    outdir = Path(args.out) if args.out else Path(".")
    outdir.mkdir(parents=True, exist_ok=True)
    header = ["algorithm", "mu", "u", "final_window_mse",
              "iterations_to_90pct_weight"]
    with open(outdir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["algorithm"], _fmt(row["mu"]), _fmt(row["u"]),
                             _fmt(row["final_window_mse"]),
                             _fmt(row["iterations_to_90pct_weight"])])

    print(f"wrote compare.csv to {outdir}")
    print("ranking by iterations to 90% of steady-state weight:")
    for rank, row in enumerate(
            sorted(rows, key=lambda r: (r["iterations_to_90pct_weight"],
                                        r["final_window_mse"])), start=1):
        print(f"  {rank}. {row['algorithm']:>18s}  "
              f"iters={row['iterations_to_90pct_weight']:>8d}  "
              f"final_mse={row['final_window_mse']:.6g}  ({row['path']})")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = _load_config(args.config)
    # fill defaults and resolve tau deterministically; mu ranges stay symbolic
    echo = config.to_dict()
    if config.signal.snr_db is not None:
        echo["signal"].pop("snr_db", None)
        echo["signal"]["tau"] = harness.resolve(config).tau
    json.dump(echo, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bregmix",
        description="Adaptive filter mixtures with multiplicative updates: "
                    "Monte Carlo experiments and moment-recursion checks.",
    )
    parser.add_argument("--version", action="version",
                        version=f"bregmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment, write CSV curves")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (default: from config)")
    p_run.add_argument("--runs", type=int, help="override run count")
    p_run.add_argument("--seed", type=int, help="override seed")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="run several combiners on the same setup")
    p_cmp.add_argument("configs", nargs="+")
    p_cmp.add_argument("--out", help="directory for compare.csv (default: .)")
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate",
                           help="check a config and print the resolved form")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _print_config_errors(exc)
        return EXIT_CONFIG
    except EnsembleDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
