"""Headless command-line entry point.

Commands: serve, sweep, optimize, report, simulate.  Exit codes are stable
across commands: 0 success/converged, 2 usage or configuration error,
3 aborted/failed run, 4 tool-environment error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .backend import load_design, make_backend
from .config import ADVISOR_MODES, CliConfig, load_config
from .docstore import DocStore
from .errors import (ConfigurationError, EdaLoopError, HistoryError,
                     ToolEnvironmentError)
from .metrics import Objective, format_table_csv, format_table_text
from .optimizer import (RunStatus, new_run_dir, phase1_sweep,
                        run_optimization, summarize_deltas)
from .reporting import (bundled_fixture_path, sweep_table_lines,
                        table_from_history_paths, table_from_comparison_csv)
from .server import serve

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_ENVIRONMENT = 4

logger = logging.getLogger(__name__)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="TOML config file")
    parser.add_argument("--runs-dir", metavar="PATH", help="run artifact directory")
    parser.add_argument("--backend", choices=["mock", "real"], help="execution backend")
    parser.add_argument("--advisor", choices=list(ADVISOR_MODES),
                        help="proposal source for refinement")
    parser.add_argument("--objective", choices=[o.value for o in Objective],
                        help="optimization objective (default timing)")
    parser.add_argument("--corpus", metavar="DIR", help="documentation corpus directory")
    parser.add_argument("--max-iterations", type=int, help="refinement iteration budget")
    parser.add_argument("--patience", type=int, help="unaccepted streak that converges")
    parser.add_argument("--target", type=float, help="score threshold for early stop")
    parser.add_argument("--duplicate-retries", type=int,
                        help="advisor retries on duplicate proposals")
    parser.add_argument("--constraints", help="free-text goal passed to the advisor")
    parser.add_argument("--mock-a0", type=float, help="mock model base area (um2)")
    parser.add_argument("--mock-d0", type=float, help="mock model base delay (ns)")
    parser.add_argument("--run-label", help="run directory label (default: UTC timestamp)")
    parser.add_argument("--verbose", action="store_true", help="log INFO to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eda-loop",
        description="Drive an RTL-to-GDSII toolchain and run backend-aware "
                    "synthesis optimization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the MCP stdio server until stdin closes")
    _add_common_flags(p)

    p = sub.add_parser("sweep", help="evaluate the nine fixed strategies")
    p.add_argument("design", help="design file (.v/.sv or .json description)")
    _add_common_flags(p)

    p = sub.add_parser("optimize", help="full three-phase optimization run")
    p.add_argument("design", help="design file (.v/.sv or .json description)")
    _add_common_flags(p)

    p = sub.add_parser("report", help="comparison table with GeoMean and Ratio rows")
    p.add_argument("inputs", nargs="*",
                   help="history.json paths, or one fixture CSV")
    p.add_argument("--bundled-fixture", action="store_true",
                   help="use the packaged per-design delay/area fixture")
    p.add_argument("--format", choices=["text", "csv"], default="text",
                   help="output rendering (same numbers either way)")
    _add_common_flags(p)

    p = sub.add_parser("simulate", help="compile and run the design testbench")
    p.add_argument("design", help="design file (.v/.sv or .json description)")
    _add_common_flags(p)
    return parser


def _resolve_config(args: argparse.Namespace) -> CliConfig:
    """Flags win over the config file, which wins over defaults."""
    config = load_config(args.config)
    backend = config.backend
    if args.backend:
        backend = dataclasses.replace(backend, mode=args.backend)
    if args.mock_a0 is not None:
        backend = dataclasses.replace(backend, mock_a0=args.mock_a0)
    if args.mock_d0 is not None:
        backend = dataclasses.replace(backend, mock_d0=args.mock_d0)
    loop = config.loop
    if args.max_iterations is not None:
        loop = dataclasses.replace(loop, max_iterations=args.max_iterations)
    if args.patience is not None:
        loop = dataclasses.replace(loop, patience=args.patience)
    if args.target is not None:
        loop = dataclasses.replace(loop, target=args.target)
    if args.duplicate_retries is not None:
        loop = dataclasses.replace(loop, duplicate_retries=args.duplicate_retries)
    return CliConfig(
        backend=backend,
        advisor_mode=args.advisor or config.advisor_mode,
        remote=config.remote,
        loop=loop,
        runs_dir=Path(args.runs_dir) if args.runs_dir else config.runs_dir,
        corpus_dir=Path(args.corpus) if args.corpus else config.corpus_dir,
        constraints=args.constraints if args.constraints is not None else config.constraints,
    )


def _objective(args: argparse.Namespace) -> Objective:
    return Objective(args.objective or "timing")


def _check_design_path(path: str) -> None:
    if not Path(path).exists():
        raise ConfigurationError(f"design file not found: {path}")


def _check_remote_credential(config: CliConfig) -> None:
    if config.advisor_mode != "remote":
        return
    if not config.remote.base_url or not config.remote.model:
        raise ConfigurationError("remote advisor needs base_url and model in config")
    if not os.environ.get(config.remote.api_key_env):
        raise ConfigurationError(
            f"remote advisor credential missing: set ${config.remote.api_key_env}")


def _make_advisor(config: CliConfig):
    from .advisor import HeuristicAdvisor, RemoteAdvisor
    if config.advisor_mode == "remote":
        return RemoteAdvisor(config.remote)
    return HeuristicAdvisor()


def _load_doc_store(config: CliConfig) -> DocStore:
    store = DocStore()
    if config.corpus_dir is not None:
        store.load_directory(config.corpus_dir)
    return store


def cmd_serve(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    return serve(config)


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _check_design_path(args.design)
    design = load_design(args.design)
    backend = make_backend(config.backend)
    run_dir = new_run_dir(config.runs_dir, design.name, args.run_label)
    history, ref = phase1_sweep(design, backend, _objective(args), run_dir)
    for line in sweep_table_lines(history):
        print(line)
    print(f"reference: delay {ref.delay_ref_ns:.3f} ns, area {ref.area_ref_um2:.2f} um2")
    print(f"history: {run_dir / 'history.json'}")
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _check_design_path(args.design)
    _check_remote_credential(config)
    design = load_design(args.design)
    backend = make_backend(config.backend)
    run_dir = new_run_dir(config.runs_dir, design.name, args.run_label)
    history = run_optimization(design, backend, _make_advisor(config),
                               _load_doc_store(config), _objective(args),
                               config.loop, run_dir, constraints=config.constraints)
    best = history.baseline_record.metrics
    print(f"status: {history.status.value}")
    print(f"refine iterations: {len(history.refine_records())}")
    print(f"final delay {best.critical_path_ns:.3f} ns, area {best.area_um2:.2f} um2")
    for line in summarize_deltas(history):
        print(line)
    print(f"history: {run_dir / 'history.json'}")
    return EXIT_OK if history.status is not RunStatus.ABORTED else EXIT_ABORTED


def cmd_report(args: argparse.Namespace) -> int:
    _resolve_config(args)  # surfaces config-file errors with the usual exit code
    inputs = list(args.inputs)
    if args.bundled_fixture:
        inputs.append(str(bundled_fixture_path()))
    if not inputs:
        raise ConfigurationError("report needs history paths, a CSV, or --bundled-fixture")
    if len(inputs) == 1 and inputs[0].endswith(".csv"):
        if not Path(inputs[0]).exists():
            raise ConfigurationError(f"fixture CSV not found: {inputs[0]}")
        table = table_from_comparison_csv(inputs[0])
    else:
        for p in inputs:
            if not Path(p).exists():
                raise ConfigurationError(f"history not found: {p}")
        table = table_from_history_paths(inputs)
    renderer = format_table_csv if args.format == "csv" else format_table_text
    sys.stdout.write(renderer(table))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _check_design_path(args.design)
    design = load_design(args.design)
    backend = make_backend(config.backend)
    workdir = new_run_dir(config.runs_dir, design.name, args.run_label)
    result = backend.simulate(design, workdir)
    print(f"simulation {'PASSED' if result.passed else 'FAILED'}")
    print(f"log: {result.log_path}")
    if result.vcd_path:
        print(f"vcd: {result.vcd_path}")
    return EXIT_OK if result.passed else EXIT_ABORTED


_COMMANDS = {
    "serve": cmd_serve,
    "sweep": cmd_sweep,
    "optimize": cmd_optimize,
    "report": cmd_report,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, HistoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ToolEnvironmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except EdaLoopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
