"""Command line interface.

Subcommands:

* ``validate <config.json>`` -- check a config file and report the parsed
  shape without running anything.
* ``run <config.json>`` -- execute one experiment; writes ``trace.csv`` and
  ``summary.json`` into the output directory.
* ``ab <config.json>`` -- paired comparison of the federated and the
  noncooperative learner over shared seeds; prints a per-seed table and
  writes ``ab.json``.
* ``audit-bits <config.json>`` -- run with the wire-format audit enabled and
  write ``audit.json`` recording whether every frame's encoded payload
  matched the analytic bit account.

All failures print a machine-readable JSON error object to stdout and exit
with status 2.  The output directory defaults to the current directory and
can be overridden with ``--out`` or the ``FEDOMS_OUT_DIR`` environment
variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    build_experiment,
    load_config,
    resolve_output_dir,
    run_from_config,
)
from .learners import run_fomd_oms, run_nco_oms
from .results import compute_mse


def _emit(blob: dict) -> None:
    print(json.dumps(blob, indent=2, sort_keys=True))


def _fail(error: ConfigError) -> int:
    _emit(error.to_dict())
    return 2


def _config_digest(config: ExperimentConfig) -> dict:
    return {
        "algorithm": config.algorithm,
        "clients": config.clients,
        "num_spaces": len(config.spaces),
        "subset_size": config.subset_size,
        "loss": config.loss,
        "seed": config.seed,
        "horizon": config.horizon,
        "epochs": config.epochs,
        "data_source": config.data.source,
    }


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    _emit({"status": "ok", "config": _config_digest(config)})
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    artifact = run_from_config(config)
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.csv"
    summary_path = out_dir / "summary.json"
    artifact.to_csv(trace_path)
    summary = artifact.summary_dict()
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit({
        "status": "ok",
        "trace": str(trace_path),
        "summary": str(summary_path),
        "mse": summary["mse"],
        "total_uplink_bits": summary["total_uplink_bits"],
        "total_downlink_bits": summary["total_downlink_bits"],
    })
    return 0


def _cmd_ab(args) -> int:
    config = load_config(args.config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1", field="seeds")
    fed_runs, solo_runs, rows = [], [], []
    for offset in range(args.seeds):
        seed = config.seed + offset
        paired = dataclasses.replace(config, seed=seed, epochs=None,
                                     algorithm="fomd", audit=False)
        learner, streams = build_experiment(paired)
        fed = run_fomd_oms(learner, streams)
        solo = run_nco_oms(learner, streams)
        fed_runs.append(fed)
        solo_runs.append(solo)
        delta = solo.mse() - fed.mse()
        rows.append({
            "seed": seed,
            "mse_federated": fed.mse(),
            "mse_noncooperative": solo.mse(),
            "delta": delta,
            "sign": "+" if delta > 0 else ("-" if delta < 0 else "0"),
        })
    fed_summary = compute_mse(fed_runs)
    solo_summary = compute_mse(solo_runs)
    deltas = np.array([row["delta"] for row in rows])
    report = {
        "status": "ok",
        "seeds": args.seeds,
        "rows": rows,
        "mse_federated_mean": fed_summary.mse_mean,
        "mse_noncooperative_mean": solo_summary.mse_mean,
        "delta_mean": float(deltas.mean()),
        "wins_federated": int((deltas > 0).sum()),
    }
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ab.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    header = f"{'seed':>6}  {'federated':>12}  {'noncoop':>12}  {'delta':>12}  sign"
    print(header)
    for row in rows:
        print(f"{row['seed']:>6}  {row['mse_federated']:>12.6f}  "
              f"{row['mse_noncooperative']:>12.6f}  {row['delta']:>12.6f}  "
              f"{row['sign']:>4}")
    print(f"mean delta (noncoop - federated): {report['delta_mean']:.6f} "
          f"({report['wins_federated']}/{args.seeds} wins)")
    _emit({k: v for k, v in report.items() if k != "rows"})
    return 0


def _cmd_audit_bits(args) -> int:
    config = load_config(args.config)
    if config.algorithm != "fomd":
        raise ConfigError("audit-bits applies to the federated algorithm only",
                          field="algorithm")
    audited = dataclasses.replace(config, audit=True)
    artifact = run_from_config(audited)
    frames_checked = artifact.meta.get("audit_frames_checked", 0)
    mismatches = list(artifact.meta.get("audit_mismatches", ()))
    report = {
        "status": "ok" if not mismatches else "mismatch",
        "frames_checked": frames_checked,
        "mismatches": mismatches,
        "account_matches_frames": not mismatches,
        "total_uplink_bits": artifact.total_uplink_bits,
        "total_downlink_bits": artifact.total_downlink_bits,
    }
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "audit.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return 0 if not mismatches else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedoms",
        description="Federated online model selection simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a config file")
    p_validate.add_argument("config")
    p_validate.set_defaults(func=_cmd_validate)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_ab = sub.add_parser(
        "ab", help="paired federated vs noncooperative comparison")
    p_ab.add_argument("config")
    p_ab.add_argument("--seeds", type=int, default=10,
                      help="number of paired seeds (default 10)")
    p_ab.add_argument("--out", default=None, help="output directory")
    p_ab.set_defaults(func=_cmd_ab)

    p_audit = sub.add_parser(
        "audit-bits", help="run with the wire-format audit enabled")
    p_audit.add_argument("config")
    p_audit.add_argument("--out", default=None, help="output directory")
    p_audit.set_defaults(func=_cmd_audit_bits)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
