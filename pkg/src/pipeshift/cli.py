"""Command-line front end: validate scenarios, run them, sweep grids.

Exit codes: 0 success (an infeasible reconfiguration trigger is a result,
not an error), 2 scenario validation failure, 3 initial configuration
cannot be set up at all, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import traceback

from .cluster import enumerate_pp_configs, validate_pp_config
from .engine import Metrics, score
from .scenario import SCHEMA_VERSION, Scenario, ScenarioError, load_scenario
from .simulation import RunResult, SetupInfeasible, run_scenario

METRIC_COLUMNS = [
    "ttft_mean", "ttft_p99", "tpot_mean", "throughput", "stop_time",
    "migration_time", "effective_kv_utilization", "overflow_events",
    "completed", "reconfig_outcome",
]

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_SETUP_INFEASIBLE = 3


def config_label(config) -> str:
    return "/".join(str(e - s + 1) for _g, (s, e) in config.assignment)


def _write_summary(out_dir: str, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def _apply_flag_overrides(scenario: Scenario, args) -> Scenario:
    flags = scenario.flags
    for name in ("kv_resize", "kv_patch", "async_weights", "handshake"):
        value = getattr(args, name)
        if value is not None:
            flags = dataclasses.replace(flags, **{name: value == "on"})
    fabric = dataclasses.replace(scenario.fabric, handshake=flags.handshake)
    model = scenario.model
    if args.stacking is not None:
        model = dataclasses.replace(model, stacking_factor=args.stacking)
        violations = validate_pp_config(scenario.initial_config, model,
                                        scenario.cluster)
        if violations:
            raise ScenarioError(f"--stacking {args.stacking}: {violations}")
    return dataclasses.replace(scenario, flags=flags, fabric=fabric, model=model)


def cmd_run(args) -> int:
    scenario = _apply_flag_overrides(load_scenario(args.scenario), args)
    os.makedirs(args.out, exist_ok=True)
    result = run_scenario(scenario, seed=args.seed)
    with open(os.path.join(args.out, "trace.jsonl"), "w") as fh:
        fh.write(result.trace.to_jsonl())
    row = result.metrics.as_row()
    _write_csv(os.path.join(args.out, "metrics.csv"), METRIC_COLUMNS, [row])
    _write_summary(args.out, {
        "command": "run",
        "scenario": os.path.abspath(args.scenario),
        "seed": args.seed,
        "events": len(result.trace),
        "metrics": row,
        "reconfig_outcome": result.metrics.reconfig_outcome,
    })
    print(f"run complete: {result.metrics.completed} requests, "
          f"outcome={result.metrics.reconfig_outcome}")
    return EXIT_OK


def sweep_rows(scenario: Scenario, axis: str, seed: int) -> tuple[list[str], list[dict]]:
    """One simulator run per grid point; returns (columns, rows with scores)."""
    rates = scenario.sweep.rates or [scenario.workload.rate]
    points: list[tuple[str, str, str, Scenario]] = []  # (config, rate, stacking, scenario)

    if axis == "config-grid":
        gpu_ids = [g.id for g in scenario.cluster]
        configs = enumerate_pp_configs(scenario.model.num_layers,
                                       scenario.model.stacking_factor, gpu_ids)
        for rate in rates:
            workload = dataclasses.replace(scenario.workload, rate=rate)
            for cfg in configs:
                scen = dataclasses.replace(scenario, initial_config=cfg,
                                           workload=workload, triggers=[])
                points.append((config_label(cfg), repr(rate),
                               str(scenario.model.stacking_factor), scen))
    elif axis == "rate-grid":
        for rate in rates:
            workload = dataclasses.replace(scenario.workload, rate=rate)
            scen = dataclasses.replace(scenario, workload=workload)
            points.append((config_label(scenario.initial_config), repr(rate),
                           str(scenario.model.stacking_factor), scen))
    elif axis == "stacking-grid":
        for k in scenario.sweep.stacking:
            model = dataclasses.replace(scenario.model, stacking_factor=k)
            violations = validate_pp_config(scenario.initial_config, model,
                                            scenario.cluster)
            if violations:
                continue  # this k cannot express the scenario's partition
            scen = dataclasses.replace(scenario, model=model)
            points.append((config_label(scenario.initial_config),
                           repr(scenario.workload.rate), str(k), scen))
    else:
        raise ScenarioError(f"axis: unknown sweep axis {axis!r}")

    rows: list[dict] = []
    metrics_rows: list[Metrics] = []
    for config_lbl, rate_lbl, stacking_lbl, scen in points:
        result = run_scenario(scen, seed=seed)
        metrics_rows.append(result.metrics)
        row = {"config": config_lbl, "rate": rate_lbl, "stacking": stacking_lbl}
        row.update(result.metrics.as_row())
        rows.append(row)
    for row, s in zip(rows, score(metrics_rows) if rows else []):
        row["score"] = repr(s)
    columns = ["config", "rate", "stacking"] + METRIC_COLUMNS + ["score"]
    return columns, rows


def cmd_sweep(args) -> int:
    scenario = _apply_flag_overrides(load_scenario(args.scenario), args)
    os.makedirs(args.out, exist_ok=True)
    columns, rows = sweep_rows(scenario, args.axis, args.seed)
    _write_csv(os.path.join(args.out, "sweep.csv"), columns, rows)
    _write_summary(args.out, {
        "command": "sweep",
        "axis": args.axis,
        "scenario": os.path.abspath(args.scenario),
        "seed": args.seed,
        "rows": len(rows),
        "columns": columns,
    })
    print(f"sweep complete: {len(rows)} grid points -> {args.out}/sweep.csv")
    return EXIT_OK


def cmd_validate(args) -> int:
    load_scenario(args.scenario)
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipeshift",
        description="Simulate live in-place pipeline-parallel reconfiguration")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("scenario", help="scenario YAML file")
        p.add_argument("--seed", type=int,
                       default=int(os.environ.get("PIPESHIFT_SEED", "0")))
        p.add_argument("--out", default=os.environ.get("PIPESHIFT_OUT", "out"))
        for flag in ("kv-resize", "kv-patch", "async-weights", "handshake"):
            p.add_argument(f"--{flag}", dest=flag.replace("-", "_"),
                           choices=("on", "off"), default=None,
                           help=f"override the scenario's {flag} flag")
        p.add_argument("--stacking", type=int, default=None,
                       help="override the layer stacking factor")

    p_run = sub.add_parser("run", help="run one scenario")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of scenario variants")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=("config-grid", "rate-grid", "stacking-grid"))
    p_sweep.set_defaults(fn=cmd_sweep)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("scenario")
    p_val.set_defaults(fn=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SetupInfeasible as exc:
        print(f"setup infeasible: {exc}", file=sys.stderr)
        return EXIT_SETUP_INFEASIBLE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
