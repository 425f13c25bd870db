"""
BiFAMP Command Line
Instance generation, AMP runs, state evolution, thresholds and phase sweeps

Usage:
    python -m bifamp.cli <gen|amp|se|thresholds|phase> --config run.json [flags]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 unconverged run under --strict.
"""
import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError

from bifamp.core.config import settings
from bifamp.core.errors import BifampError, ConfigError, NumericalError, UnconvergedError
from bifamp.core.io import atomic_write
from bifamp.schemas.reports import AmpRunReport, GridRow
from bifamp.schemas.run import RunConfig
from bifamp.services.amp import amp_run, evaluate_mse
from bifamp.services.bethe import free_entropy_report
from bifamp.services.factory import build_model
from bifamp.services.instances import STREAM_SOLVER, generate, load_instance, save_instance, substream
from bifamp.services.phase import sweep_grid, threshold_report
from bifamp.services.rbp import rbp_run
from bifamp.services.state_evolution import replica_free_entropy, se_run, se_run_general

logger = logging.getLogger(__name__)

COMMANDS = ("gen", "amp", "se", "thresholds", "phase")
TRACE_COLUMNS = [
    "seed", "iteration", "mean_delta_a", "m_x", "m_f", "mse_x", "mse_f", "mse_z",
    "phi_bethe", "nishimori_dg", "nishimori_g2",
]
GRID_RESULT_COLUMNS = ["mmse_x", "mmse_f", "amp_mse_x", "amp_mse_f", "regime", "converged", "error"]
GENERAL_COLUMNS = ["iteration", "m_x", "q_x", "Q_x", "m_f", "q_f", "Q_f"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bifamp", description="Bayes-optimal matrix factorization by AMP")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="Run configuration (JSON)")
        cmd.add_argument("--seed", type=int, help="Override the seed")
        cmd.add_argument("--threads", type=int, help="Worker cap; BIFAMP_THREADS is the fallback")
        cmd.add_argument("--out", help="Primary output path")
        cmd.add_argument("--strict", action="store_true", help="Exit 4 when a run did not converge")
        cmd.add_argument("--emit-plot", action="store_true", help="Write a gnuplot script next to the CSV")
        cmd.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return parser


def load_config(command: str, args: argparse.Namespace) -> RunConfig:
    """Read the JSON document and apply the flag overrides; ConfigError on any problem."""
    try:
        document = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError("config must be a JSON object")

    document["command"] = command
    if args.seed is not None:
        document["seed"] = args.seed
        document.pop("seeds", None)
    if args.threads is not None:
        document["threads"] = args.threads
    if args.out is not None:
        document["out"] = args.out
    if args.strict:
        document["strict"] = True
    if args.emit_plot:
        document["emit_plot"] = True
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def _out(config: RunConfig, default: str) -> Path:
    return Path(config.out or default)


def _json_text(payload: Any) -> str:
    try:
        return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    except ValueError as exc:
        raise NumericalError(f"result holds a non-finite value: {exc}") from exc


def _csv_text(fieldnames: list[str], rows: list[dict]) -> str:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
    return buf.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(config: RunConfig) -> bool:
    instance = generate(config.problem, config.n, config.seed)
    save_instance(instance, _out(config, f"instance_{config.seed}.bin"))
    return True


def _amp_one(config: RunConfig, seed: int, instance=None) -> tuple[AmpRunReport, list[dict]]:
    if instance is None:
        instance = generate(config.problem, config.n, seed)
    problem, n = instance.problem, instance.n
    model = build_model(problem, instance)
    truth = (instance.F0, instance.X0)
    result = amp_run(problem, instance.Y, config.amp, substream(seed, STREAM_SOLVER), n, model, truth)
    state = result.state
    last_delta = result.diagnostics[-1].mean_delta_a if result.diagnostics else None
    report = AmpRunReport(
        seed=seed,
        iterations=result.iterations,
        converged=result.converged,
        mse=evaluate_mse(state.a, state.r, instance.X0, instance.F0),
        free_entropy=free_entropy_report(state, instance.Y, model.prior_x, model.prior_f, model.channel, last_delta),
        nishimori_trace=[(d.nishimori_dg, d.nishimori_g2) for d in result.diagnostics],
        clamped_variances=result.clamped_total,
    )
    if config.rbp:
        oracle = rbp_run(problem, instance.Y, config.amp, substream(seed, STREAM_SOLVER), n, model, truth)
        report.rbp_mse_z = evaluate_mse(oracle.state.a, oracle.state.r, instance.X0, instance.F0).mse_z
    rows = [{"seed": seed, **asdict(row)} for row in result.trace]
    return report, rows


def cmd_amp(config: RunConfig) -> bool:
    if config.instance:
        instance = load_instance(config.instance)
        runs = [_amp_one(config, instance.seed, instance)]
    else:
        runs = [_amp_one(config, seed) for seed in (config.seeds or [config.seed])]
    out = _out(config, "amp.json")
    payload = {
        "config": config.model_dump(mode="json"),
        "runs": [report.model_dump(mode="json") for report, _ in runs],
    }
    atomic_write(out, _json_text(payload))
    atomic_write(out.with_suffix(".csv"), _csv_text(TRACE_COLUMNS, [row for _, rows in runs for row in rows]))
    return all(report.converged for report, _ in runs)


def cmd_se(config: RunConfig) -> bool:
    if config.se.general or config.truth is not None:
        return _se_general(config)
    problem = config.problem
    model = build_model(problem)
    run = se_run(problem, config.se, model)
    phi = replica_free_entropy(problem, run.fixed_point.m_x, run.fixed_point.m_f, model)
    out = _out(config, "se.json")
    payload = {
        "config": config.model_dump(mode="json"),
        "fixed_point": run.report(phi).model_dump(mode="json"),
        "quadrature_order": run.order,
        "monotonicity_violations": run.monotonicity_violations,
    }
    atomic_write(out, _json_text(payload))

    classes = len(run.fixed_point.m_f)
    columns = ["iteration", "m_x"] + [f"m_f{k}" for k in range(classes)]
    rows = []
    for t, state in enumerate(run.trajectory):
        row = {"iteration": t, "m_x": float(state.m_x)}
        row.update({f"m_f{k}": float(v) for k, v in enumerate(state.m_f)})
        rows.append(row)
    atomic_write(out.with_suffix(".csv"), _csv_text(columns, rows))
    return run.converged


def _se_general(config: RunConfig) -> bool:
    run = se_run_general(config.problem, config.se, config.truth)
    out = _out(config, "se.json")
    state = run.fixed_point
    payload = {
        "config": config.model_dump(mode="json"),
        "general_fixed_point": {
            **{name: float(getattr(state, name)) for name in GENERAL_COLUMNS[1:]},
            "e_x": run.e_x,
            "e_f": run.e_f,
            "iterations": run.iterations,
            "converged": run.converged,
        },
    }
    atomic_write(out, _json_text(payload))
    rows = [{"iteration": t, **{name: float(getattr(s, name)) for name in GENERAL_COLUMNS[1:]}}
            for t, s in enumerate(run.trajectory)]
    atomic_write(out.with_suffix(".csv"), _csv_text(GENERAL_COLUMNS, rows))
    return run.converged


def cmd_thresholds(config: RunConfig) -> bool:
    phase = config.phase
    report = threshold_report(
        config.problem,
        axis=phase.axis if phase.bracket else None,
        bracket=phase.bracket,
        tolerance=phase.tolerance,
        workers=settings.worker_count(config.threads),
    )
    atomic_write(_out(config, "thresholds.json"), _json_text(report.model_dump(mode="json")))
    return True


def gnuplot_script(csv_path: Path, axis: str) -> str:
    """Script drawing MMSE_X and AMP-MSE_X against the first swept axis."""
    return "\n".join([
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{axis}'",
        "set ylabel 'MSE of X'",
        f"plot '{csv_path.name}' using '{axis}':'mmse_x' with linespoints title 'MMSE', \\",
        f"     '' using '{axis}':'amp_mse_x' with linespoints title 'AMP-MSE'",
        "",
    ])


def grid_table(rows: list[GridRow]) -> tuple[list[str], list[dict]]:
    axes = list(rows[0].params) if rows else []
    table = [{**row.params, **row.model_dump(include=set(GRID_RESULT_COLUMNS))} for row in rows]
    return axes + GRID_RESULT_COLUMNS, table


def cmd_phase(config: RunConfig) -> bool:
    rows = sweep_grid(config.problem, config.phase.grid, config.se, settings.worker_count(config.threads))
    columns, table = grid_table(rows)
    out = _out(config, "phase.csv")
    atomic_write(out, _csv_text(columns, table))
    if config.emit_plot:
        axis = columns[0] if rows and rows[0].params else config.phase.axis
        atomic_write(out.with_suffix(".gp"), gnuplot_script(out, axis))
    failed = [row for row in rows if row.error]
    if failed:
        logger.warning("%d of %d grid points failed", len(failed), len(rows))
    return all(row.converged for row in rows if row.error is None)


HANDLERS = {
    "gen": cmd_gen,
    "amp": cmd_amp,
    "se": cmd_se,
    "thresholds": cmd_thresholds,
    "phase": cmd_phase,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.command, args)
        logger.info("%s %s: %s", settings.APP_NAME, config.command, config.problem.application.value)
        with np.errstate(over="ignore", under="ignore"):
            converged = HANDLERS[config.command](config)
        if config.strict and not converged:
            raise UnconvergedError(f"{config.command} finished without converging")
    except BifampError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
