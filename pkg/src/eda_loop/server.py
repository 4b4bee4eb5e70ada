"""MCP server: JSON-RPC 2.0 over stdio, line-delimited.

One message per line on stdin, one response line per request on stdout,
nothing on stdout that is not protocol (logs go to stderr).  Tool failures
are reported as tool-error content so a calling agent can read diagnostics
and retry; protocol errors use the standard JSON-RPC codes.  Messages are
processed strictly sequentially: a tool call runs to completion before the
next line is read.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .abc_script import parse_script
from .advisor import HeuristicAdvisor, RemoteAdvisor
from .backend import (CustomStrategy, FixedStrategy, Strategy, StrategyKind,
                      load_design, make_backend)
from .config import CliConfig
from .docstore import DocStore
from .errors import ConfigurationError, EdaLoopError, HistoryError
from .metrics import Objective, format_table_csv, format_table_text
from .optimizer import (LoopConfig, OptimizationHistory, history_to_json,
                        load_history, new_run_dir, phase1_sweep, run_optimization,
                        summarize_deltas)
from .reporting import (sweep_table_lines, table_from_history_paths,
                        table_from_comparison_csv)
from .reports import emit_metrics_doc

logger = logging.getLogger(__name__)

SERVER_NAME = "eda-loop"
SERVER_VERSION = "0.1.0"
PROTOCOL_VERSION = "2024-11-05"
SUPPORTED_PROTOCOL_VERSIONS = ("2024-11-05", "2025-03-26", "2025-06-18")

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    input_schema: dict

    def to_json(self) -> dict:
        return {"name": self.name, "description": self.description,
                "inputSchema": self.input_schema}


@dataclass
class Session:
    initialized: bool = False
    client_info: dict = field(default_factory=dict)
    histories: dict[str, tuple[OptimizationHistory, Path]] = field(default_factory=dict)


def _schema(properties: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": properties, "required": required,
            "additionalProperties": False}


_OBJECTIVE_PROP = {"type": "string", "enum": ["timing", "area", "balanced"]}

TOOLS: tuple[ToolDescriptor, ...] = (
    ToolDescriptor(
        "simulate_rtl",
        "[simulation] Compile and run the design's testbench; reports pass/fail "
        "and the log/VCD paths.",
        _schema({"design": {"type": "string"},
                 "workdir": {"type": "string"}}, ["design"])),
    ToolDescriptor(
        "synthesize",
        "[synthesis] Synthesize a design with a fixed strategy level or a custom "
        "command sequence; returns netlist path and cell statistics.",
        _schema({"design": {"type": "string"},
                 "top_module": {"type": "string"},
                 "strategy": {"type": "string"},
                 "workdir": {"type": "string"}}, ["design", "top_module"])),
    ToolDescriptor(
        "run_backend",
        "[backend] Run the place-and-route flow on a netlist and report "
        "post-layout metrics.",
        _schema({"design": {"type": "string"},
                 "netlist": {"type": "string"},
                 "workdir": {"type": "string"}}, ["design", "netlist"])),
    ToolDescriptor(
        "sweep_baseline",
        "[synthesis] Evaluate all nine fixed strategies (DELAY 0-4, AREA 0-3) "
        "and report the per-objective baseline.",
        _schema({"design": {"type": "string"},
                 "objective": _OBJECTIVE_PROP,
                 "run_label": {"type": "string"}}, ["design"])),
    ToolDescriptor(
        "optimize_design",
        "[synthesis] Full closed-loop optimization: baseline sweep, advised "
        "refinement, convergence; returns final metrics and the history path.",
        _schema({"design": {"type": "string"},
                 "objective": _OBJECTIVE_PROP,
                 "max_iterations": {"type": "integer", "minimum": 1},
                 "patience": {"type": "integer", "minimum": 1},
                 "target": {"type": "number", "exclusiveMinimum": 0},
                 "run_label": {"type": "string"}}, ["design"])),
    ToolDescriptor(
        "query_docs",
        "[docs] Rank documentation snippets for a query with BM25.",
        _schema({"query": {"type": "string"},
                 "k": {"type": "integer", "minimum": 1}}, ["query"])),
    ToolDescriptor(
        "get_history",
        "[state] Return a stored optimization history, by design name from this "
        "session or from an explicit history.json path.",
        _schema({"design": {"type": "string"},
                 "history_path": {"type": "string"}}, [])),
    ToolDescriptor(
        "report_table",
        "[reporting] Comparison table with GeoMean and Ratio rows, from "
        "history.json paths or a fixture CSV.",
        _schema({"histories": {"type": "array", "items": {"type": "string"}},
                 "csv": {"type": "string"},
                 "format": {"type": "string", "enum": ["text", "csv"]}}, [])),
)

_TOOL_INDEX = {t.name: t for t in TOOLS}


def parse_strategy_text(text: str) -> Strategy:
    """``DELAY k`` / ``AREA k`` select the fixed ladder; anything else is
    parsed as a custom command sequence."""
    parts = text.strip().split()
    if len(parts) == 2 and parts[0].upper() in ("DELAY", "AREA"):
        try:
            level = int(parts[1])
        except ValueError:
            level = -1
        if level >= 0:
            return FixedStrategy(StrategyKind(parts[0].upper()), level)
    return CustomStrategy(parse_script(text))


def _text_block(text: str) -> dict:
    return {"type": "text", "text": text}


class Server:
    """Session-scoped request handler bound to one runtime configuration."""

    def __init__(self, config: CliConfig):
        self.config = config
        self.backend = make_backend(config.backend)
        self.doc_store = DocStore()
        if config.corpus_dir is not None:
            count = self.doc_store.load_directory(config.corpus_dir)
            logger.info("loaded %d corpus chunks from %s", count, config.corpus_dir)
        self.session = Session()

    # -- advisor selection ----------------------------------------------------
    def _advisor(self):
        if self.config.advisor_mode == "remote":
            return RemoteAdvisor(self.config.remote)
        return HeuristicAdvisor()

    # -- protocol layer ---------------------------------------------------------
    def handle_line(self, line: str) -> str | None:
        """One raw input line to at most one response line."""
        stripped = line.strip()
        if not stripped:
            return None
        try:
            message = json.loads(stripped)
        except json.JSONDecodeError as exc:
            return self._dump(self._error_response(None, PARSE_ERROR,
                                                   f"parse error: {exc.msg}"))
        if not isinstance(message, dict):
            return self._dump(self._error_response(None, INVALID_REQUEST,
                                                   "request must be a JSON object"))
        msg_id = message.get("id")
        method = message.get("method")
        is_request = "id" in message
        if not isinstance(method, str):
            if not is_request:
                return None
            return self._dump(self._error_response(msg_id, INVALID_REQUEST,
                                                   "missing method"))
        try:
            result, error = self._dispatch(method, message.get("params") or {})
        except EdaLoopError as exc:
            result, error = None, (INTERNAL_ERROR, f"internal failure: {exc}")
        except Exception:
            logger.exception("unhandled error in %s", method)
            result, error = None, (INTERNAL_ERROR, "internal failure")
        if not is_request:
            return None
        if error is not None:
            return self._dump(self._error_response(msg_id, error[0], error[1]))
        return self._dump({"jsonrpc": "2.0", "id": msg_id, "result": result})

    @staticmethod
    def _dump(obj: dict) -> str:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def _error_response(msg_id, code: int, message: str) -> dict:
        return {"jsonrpc": "2.0", "id": msg_id,
                "error": {"code": code, "message": message}}

    def _dispatch(self, method: str, params: dict):
        """Returns (result, error) where error is (code, message) or None."""
        if method == "initialize":
            return self._initialize(params), None
        if method in ("notifications/initialized", "initialized"):
            return None, None
        if method == "ping":
            return {}, None
        if method == "tools/list":
            if not self.session.initialized:
                return None, (INVALID_PARAMS, "session not initialized")
            return {"tools": [t.to_json() for t in TOOLS]}, None
        if method == "tools/call":
            if not self.session.initialized:
                return None, (INVALID_PARAMS, "session not initialized")
            return self._tools_call(params)
        return None, (METHOD_NOT_FOUND, f"unknown method {method!r}")

    def _initialize(self, params: dict) -> dict:
        self.session.initialized = True
        self.session.client_info = params.get("clientInfo") or {}
        client_version = params.get("protocolVersion")
        version = client_version if client_version in SUPPORTED_PROTOCOL_VERSIONS \
            else PROTOCOL_VERSION
        return {
            "protocolVersion": version,
            "serverInfo": {"name": SERVER_NAME, "version": SERVER_VERSION},
            "capabilities": {"tools": {}},
        }

    def _tools_call(self, params: dict):
        name = params.get("name")
        if not isinstance(name, str) or name not in _TOOL_INDEX:
            return None, (INVALID_PARAMS, f"unknown tool {name!r}")
        arguments = params.get("arguments") or {}
        validator = jsonschema.Draft202012Validator(_TOOL_INDEX[name].input_schema)
        problems = sorted(validator.iter_errors(arguments), key=lambda e: e.json_path)
        if problems:
            details = "; ".join(p.message for p in problems)
            return None, (INVALID_PARAMS, f"invalid arguments for {name}: {details}")
        handler = getattr(self, f"_tool_{name}")
        try:
            blocks = handler(arguments)
        except EdaLoopError as exc:
            return {"content": [_text_block(f"error: {exc}")], "isError": True}, None
        return {"content": blocks, "isError": False}, None

    # -- tool handlers ----------------------------------------------------------
    def _workdir(self, arguments: dict, design_name: str, tool: str) -> Path:
        if arguments.get("workdir"):
            return Path(arguments["workdir"])
        return Path(self.config.runs_dir) / "tools" / design_name / tool

    def _tool_simulate_rtl(self, arguments: dict) -> list[dict]:
        design = load_design(arguments["design"])
        result = self.backend.simulate(
            design, self._workdir(arguments, design.name, "simulate"))
        text = (f"simulation {'PASSED' if result.passed else 'FAILED'}\n"
                f"log: {result.log_path}")
        if result.vcd_path:
            text += f"\nvcd: {result.vcd_path}"
        return [_text_block(text)]

    def _tool_synthesize(self, arguments: dict) -> list[dict]:
        design = load_design(arguments["design"])
        if design.top_module != arguments["top_module"]:
            design = dataclasses.replace(design, top_module=arguments["top_module"])
        strategy = parse_strategy_text(arguments.get("strategy", "DELAY 0"))
        netlist, stats = self.backend.synthesize(
            design, strategy, self._workdir(arguments, design.name, "synthesize"))
        text = (f"netlist: {netlist}\nnum_cells: {stats.num_cells}\n"
                f"top_module: {stats.top_module or design.top_module}")
        if stats.cell_area_um2 is not None:
            text += f"\ncell_area_um2: {stats.cell_area_um2}"
        return [_text_block(text)]

    def _tool_run_backend(self, arguments: dict) -> list[dict]:
        design = load_design(arguments["design"])
        metrics = self.backend.run_backend(
            Path(arguments["netlist"]), design,
            self._workdir(arguments, design.name, "backend"))
        return [_text_block(emit_metrics_doc(metrics).rstrip())]

    def _tool_sweep_baseline(self, arguments: dict) -> list[dict]:
        design = load_design(arguments["design"])
        objective = Objective(arguments.get("objective", "timing"))
        run_dir = new_run_dir(self.config.runs_dir, design.name,
                              arguments.get("run_label"))
        history, ref = phase1_sweep(design, self.backend, objective, run_dir)
        lines = sweep_table_lines(history)
        lines.append(f"reference: delay {ref.delay_ref_ns:.3f} ns, "
                     f"area {ref.area_ref_um2:.2f} um2")
        lines.append(f"history: {run_dir / 'history.json'}")
        self.session.histories[design.name] = (history, run_dir)
        return [_text_block("\n".join(lines))]

    def _tool_optimize_design(self, arguments: dict) -> list[dict]:
        design = load_design(arguments["design"])
        objective = Objective(arguments.get("objective", "timing"))
        loop = LoopConfig(
            max_iterations=arguments.get("max_iterations", self.config.loop.max_iterations),
            patience=arguments.get("patience", self.config.loop.patience),
            target=arguments.get("target", self.config.loop.target),
            duplicate_retries=self.config.loop.duplicate_retries,
        )
        run_dir = new_run_dir(self.config.runs_dir, design.name,
                              arguments.get("run_label"))
        history = run_optimization(design, self.backend, self._advisor(),
                                   self.doc_store, objective, loop, run_dir,
                                   constraints=self.config.constraints)
        self.session.histories[design.name] = (history, run_dir)
        best = history.baseline_record.metrics
        lines = [
            f"status: {history.status.value}",
            f"refine iterations: {len(history.refine_records())}",
            f"final delay {best.critical_path_ns:.3f} ns, area {best.area_um2:.2f} um2",
        ]
        lines.extend(summarize_deltas(history))
        lines.append(f"history: {run_dir / 'history.json'}")
        return [_text_block("\n".join(lines))]

    def _tool_query_docs(self, arguments: dict) -> list[dict]:
        hits = self.doc_store.query(arguments["query"], k=arguments.get("k", 3))
        return [_text_block(f"[{chunk.doc_id}#{chunk.chunk_index}] "
                            f"(score {score:.4f}) {chunk.text}")
                for chunk, score in hits]

    def _tool_get_history(self, arguments: dict) -> list[dict]:
        if arguments.get("history_path"):
            history = load_history(Path(arguments["history_path"]))
        elif arguments.get("design") in self.session.histories:
            history = self.session.histories[arguments["design"]][0]
        else:
            raise HistoryError("no history for this design in the session; "
                               "pass history_path")
        return [_text_block(json.dumps(history_to_json(history), indent=2,
                                       sort_keys=True))]

    def _tool_report_table(self, arguments: dict) -> list[dict]:
        if arguments.get("csv"):
            table = table_from_comparison_csv(Path(arguments["csv"]))
        elif arguments.get("histories"):
            table = table_from_history_paths([Path(p) for p in arguments["histories"]])
        else:
            raise ConfigurationError("report_table needs 'csv' or 'histories'")
        renderer = format_table_csv if arguments.get("format") == "csv" \
            else format_table_text
        return [_text_block(renderer(table).rstrip("\n"))]


def serve(config: CliConfig, stdin: io.TextIOBase | None = None,
          stdout: io.TextIOBase | None = None) -> int:
    """Run the server until stdin closes.  Returns the process exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    server = Server(config)
    logger.info("serving on stdio (backend=%s, advisor=%s)",
                config.backend.mode, config.advisor_mode)
    for line in stdin:
        response = server.handle_line(line)
        if response is not None:
            stdout.write(response + "\n")
            stdout.flush()
    logger.info("stdin closed, exiting")
    return 0
