"""Pluggable execution layer mapping (design, strategy) to backend metrics.

Two implementations share one interface: ``SubprocessBackend`` drives real
tools (synthesis via a templated TCL wrapper, a configurable place-and-route
command, an event simulator), and ``MockBackend`` is a deterministic
analytic stand-in so the optimization loop is testable at desk scale.

The mock's constants encode a delay/area trade-off, not physics; they are
fixed so independent runs agree bit-for-bit at double precision.  Workdir
layout for every evaluation: ``strategy.abc``, ``synth.tcl``, ``netlist.v``,
``metrics.json``, ``logs/``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .abc_script import (AbcCommand, AbcScript, extract_features, parse_script,
                         save_script, script_from_features, serialize, substitute)
from .errors import (MalformedReportError, PreconditionError, ToolEnvironmentError,
                     ToolFailureError, ToolTimeoutError)
from .metrics import BackendMetrics, Objective, ReferencePoint, score
from .reports import SynthStats, emit_metrics_doc, parse_metrics_doc, parse_yosys_stat

logger = logging.getLogger(__name__)

DEFAULT_CLOCK_PERIOD_NS = 10.0

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass(frozen=True)
class Design:
    name: str
    rtl_sources: tuple[str, ...]
    top_module: str
    testbench: str | None = None
    clock_period_ns: float = DEFAULT_CLOCK_PERIOD_NS

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise PreconditionError(f"design name {self.name!r} is not filesystem-safe")
        if not self.rtl_sources:
            raise PreconditionError("design needs at least one RTL source")
        if self.clock_period_ns <= 0:
            raise PreconditionError("clock_period_ns must be positive")


def load_design(path: str | Path) -> Design:
    """Load a design from a ``.json`` description or a bare Verilog file.

    JSON fields mirror the ``Design`` dataclass; a bare ``.v``/``.sv`` file
    becomes a single-source design named after its stem.
    """
    p = Path(path)
    if not p.exists():
        raise ToolEnvironmentError(f"design file not found: {p}")
    if p.suffix == ".json":
        doc = json.loads(p.read_text(encoding="utf-8"))
        sources = [str((p.parent / s)) for s in doc["rtl_sources"]]
        tb = doc.get("testbench")
        return Design(
            name=doc.get("name", p.stem),
            rtl_sources=tuple(sources),
            top_module=doc["top_module"],
            testbench=str(p.parent / tb) if tb else None,
            clock_period_ns=float(doc.get("clock_period_ns", DEFAULT_CLOCK_PERIOD_NS)),
        )
    return Design(name=p.stem, rtl_sources=(str(p),), top_module=p.stem)


class StrategyKind(Enum):
    DELAY = "DELAY"
    AREA = "AREA"


_LEVEL_RANGE = {StrategyKind.DELAY: range(0, 5), StrategyKind.AREA: range(0, 4)}


@dataclass(frozen=True)
class FixedStrategy:
    kind: StrategyKind
    level: int

    def __post_init__(self):
        if self.level not in _LEVEL_RANGE[self.kind]:
            raise PreconditionError(
                f"{self.kind.value} level {self.level} outside "
                f"[{_LEVEL_RANGE[self.kind].start}, {_LEVEL_RANGE[self.kind].stop - 1}]")

    @property
    def label(self) -> str:
        return f"{self.kind.value} {self.level}"


@dataclass(frozen=True)
class CustomStrategy:
    script: AbcScript

    @property
    def label(self) -> str:
        return "custom"


Strategy = FixedStrategy | CustomStrategy

FIXED_STRATEGIES: tuple[FixedStrategy, ...] = tuple(
    [FixedStrategy(StrategyKind.DELAY, k) for k in range(5)]
    + [FixedStrategy(StrategyKind.AREA, k) for k in range(4)])


def expand_strategy(strategy: Strategy) -> AbcScript:
    """Resolve a strategy to its command sequence.

    The fixed ladder: DELAY k maps at balance 1.00-0.05k (two-decimal
    spelling) with dch from level 2 up and k buffer passes; AREA k stacks
    k+1 mapping passes at the literal balance spelling "1.0".  The spelling
    difference keeps DELAY 0 and AREA 0 hash-distinct so a sweep history
    never records the same canonical script twice.
    """
    if isinstance(strategy, CustomStrategy):
        return strategy.script
    k = strategy.level
    if strategy.kind is StrategyKind.DELAY:
        return script_from_features(mean_balance=1.00 - 0.05 * k, n_buffer=k,
                                    has_dch=k >= 2, n_map=1)
    commands = [AbcCommand("strash")]
    commands.extend(AbcCommand("map", ("-B", "1.0")) for _ in range(k + 1))
    return AbcScript(commands=tuple(commands))


def strategy_to_json(strategy: Strategy) -> dict:
    if isinstance(strategy, FixedStrategy):
        return {"type": "fixed", "kind": strategy.kind.value, "level": strategy.level}
    return {"type": "custom", "script": serialize(strategy.script)}


def strategy_from_json(doc: dict) -> Strategy:
    if doc["type"] == "fixed":
        return FixedStrategy(StrategyKind(doc["kind"]), int(doc["level"]))
    return CustomStrategy(parse_script(doc["script"]))


# --- analytic mock -----------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; platform-independent parameter derivation."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class MockModelParams:
    """Base area/delay for the analytic model, explicit or source-hashed."""

    base_area_um2: float
    base_delay_ns: float
    derivation: str = "explicit"

    def __post_init__(self):
        if self.base_area_um2 <= 0 or self.base_delay_ns <= 0:
            raise PreconditionError("mock model parameters must be positive")

    @classmethod
    def from_source(cls, source_text: str) -> "MockModelParams":
        h = fnv1a64(source_text.encode("utf-8"))
        return cls(base_area_um2=1000.0 + (h % 9001),
                   base_delay_ns=0.50 + ((h >> 16) % 200) / 100.0,
                   derivation="hashed")


def mock_evaluate(params: MockModelParams, strategy: Strategy,
                  clock_period_ns: float = DEFAULT_CLOCK_PERIOD_NS) -> BackendMetrics:
    """Deterministic metrics for a strategy under the analytic model.

    Delay shrinks with lower mapping balance, more buffers, and dch; area
    moves the other way, with a mild bonus for stacked mapping passes
    (saturating at three).  Power tracks area linearly.
    """
    f = extract_features(expand_strategy(strategy))
    delay = (params.base_delay_ns
             * (0.70 + 0.30 * f.mean_balance)
             * (0.97 ** f.n_buffer)
             * (0.92 if f.has_dch else 1.0))
    delay = max(delay, 0.30 * params.base_delay_ns)
    area = (params.base_area_um2
            * (1.30 - 0.25 * f.mean_balance)
            * (1.03 ** f.n_buffer)
            * (1.06 if f.has_dch else 1.0)
            * (0.98 ** min(f.n_map, 3)))
    wns = clock_period_ns - delay
    return BackendMetrics(
        area_um2=area,
        critical_path_ns=delay,
        total_power_uw=area * 1.45e-4,
        wns_ns=wns,
        tns_ns=10.0 * min(0.0, wns),
        drc_violations=0,
        runtime_s=0.0,
    )


def default_mock_reference(params: MockModelParams,
                           clock_period_ns: float = DEFAULT_CLOCK_PERIOD_NS) -> ReferencePoint:
    """Reference point from the fixed-ladder minima, mirroring the sweep."""
    evals = [mock_evaluate(params, s, clock_period_ns) for s in FIXED_STRATEGIES]
    return ReferencePoint(delay_ref_ns=min(m.critical_path_ns for m in evals),
                          area_ref_um2=min(m.area_um2 for m in evals))


def mock_oracle(params: MockModelParams, objective: Objective,
                clock_period_ns: float = DEFAULT_CLOCK_PERIOD_NS,
                ref: ReferencePoint | None = None,
                balances=None, buffers=None, dch_options=(False, True),
                maps=(1, 2, 3)) -> tuple[AbcScript, BackendMetrics]:
    """Exhaustive argmin of the mock over the standard feature grid.

    Ground truth for optimizer acceptance tests; ties resolve to the first
    grid point in (balance, buffers, dch, maps) enumeration order.
    """
    if balances is None:
        balances = [0.70 + 0.02 * i for i in range(16)]
    if buffers is None:
        buffers = range(0, 5)
    if ref is None:
        ref = default_mock_reference(params, clock_period_ns)
    best = None
    for b in balances:
        for nb in buffers:
            for dch in dch_options:
                for nm in maps:
                    script = script_from_features(b, nb, dch, nm)
                    m = mock_evaluate(params, CustomStrategy(script), clock_period_ns)
                    s = score(m, objective, ref)
                    if best is None or s < best[0]:
                        best = (s, script, m)
    assert best is not None, "oracle grid must be nonempty"
    return best[1], best[2]


# --- execution interface -----------------------------------------------------

@dataclass(frozen=True)
class SimResult:
    passed: bool
    log_path: str
    vcd_path: str | None = None


@dataclass(frozen=True)
class BackendConfig:
    """Tool paths, timeouts, and mode for the execution layer."""

    mode: str = "mock"  # mock | real
    yosys_cmd: str = "yosys"
    iverilog_cmd: str = "iverilog"
    vvp_cmd: str = "vvp"
    backend_cmd: str = ""  # templated flow command, see SubprocessBackend
    container_image: str = ""
    synth_timeout_s: float = 300.0
    backend_timeout_s: float = 3600.0
    sim_timeout_s: float = 120.0
    mock_a0: float | None = None
    mock_d0: float | None = None


class ToolBackend:
    """Interface: synthesize, run_backend, simulate, capabilities.

    One instance may be driven from one execution context at a time per
    workdir; distinct workdirs can run in parallel.
    """

    def synthesize(self, design: Design, strategy: Strategy,
                   workdir: Path) -> tuple[Path, SynthStats]:
        raise NotImplementedError

    def run_backend(self, netlist: Path, design: Design, workdir: Path) -> BackendMetrics:
        raise NotImplementedError

    def simulate(self, design: Design, workdir: Path) -> SimResult:
        raise NotImplementedError

    def capabilities(self) -> dict:
        raise NotImplementedError


def _prepare_workdir(workdir: Path) -> Path:
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "logs").mkdir(exist_ok=True)
    except OSError as exc:
        raise ToolEnvironmentError(f"cannot create workdir {workdir}: {exc}") from None
    if not os.access(workdir, os.W_OK):
        raise ToolEnvironmentError(f"workdir {workdir} is not writable")
    return workdir


def _write_constraints(design: Design, workdir: Path) -> Path:
    sdc = workdir / "design.sdc"
    sdc.write_text(
        f"create_clock -name clk -period {design.clock_period_ns} [get_ports clk]\n",
        encoding="utf-8")
    return sdc


def _resolve_script(design: Design, strategy: Strategy, workdir: Path) -> AbcScript:
    """Expand, bind placeholders, and persist ``strategy.abc``.

    Placeholder binding happens before any process is spawned, so an
    unresolved name fails fast.
    """
    script = expand_strategy(strategy)
    env = {"sdc_file": str(workdir / "design.sdc")}
    script = substitute(script, env)
    save_script(script, workdir / "strategy.abc")
    return script


class MockBackend(ToolBackend):
    """Pure, deterministic backend: identical inputs give identical bits.

    Parameters come from the constructor or are hashed from the design's
    concatenated source text, so repeated runs on the same sources agree
    across platforms.
    """

    def __init__(self, params: MockModelParams | None = None):
        self._params = params

    def params_for(self, design: Design) -> MockModelParams:
        if self._params is not None:
            return self._params
        chunks = []
        for src in design.rtl_sources:
            p = Path(src)
            chunks.append(p.read_text(encoding="utf-8") if p.exists() else src)
        return MockModelParams.from_source("".join(chunks))

    def synthesize(self, design: Design, strategy: Strategy,
                   workdir: Path) -> tuple[Path, SynthStats]:
        workdir = _prepare_workdir(Path(workdir))
        _write_constraints(design, workdir)
        script = _resolve_script(design, strategy, workdir)
        f = extract_features(script)
        netlist = workdir / "netlist.v"
        netlist.write_text(
            f"// mock netlist: {design.name}\n// strategy: {serialize(script)}\n",
            encoding="utf-8")
        stats = SynthStats(num_cells=2 + 4 * f.n_map + f.n_buffer + (3 if f.has_dch else 0),
                           cell_area_um2=None, top_module=design.top_module)
        (workdir / "synth.tcl").write_text("# mock synthesis, no tool invoked\n",
                                           encoding="utf-8")
        return netlist, stats

    def run_backend(self, netlist: Path, design: Design, workdir: Path) -> BackendMetrics:
        workdir = Path(workdir)
        script_path = workdir / "strategy.abc"
        if not script_path.exists():
            raise PreconditionError(f"no strategy.abc in {workdir}; synthesize first")
        with open(script_path, encoding="utf-8") as fh:
            script = parse_script(fh.read())
        metrics = mock_evaluate(self.params_for(design), CustomStrategy(script),
                                design.clock_period_ns)
        (workdir / "metrics.json").write_text(emit_metrics_doc(metrics), encoding="utf-8")
        return metrics

    def simulate(self, design: Design, workdir: Path) -> SimResult:
        if design.testbench is None:
            raise PreconditionError(f"design {design.name} has no testbench")
        workdir = _prepare_workdir(Path(workdir))
        log = workdir / "logs" / "sim.log"
        log.write_text(f"mock simulation of {design.name}: PASS\n", encoding="utf-8")
        return SimResult(passed=True, log_path=str(log), vcd_path=None)

    def capabilities(self) -> dict:
        return {"mode": "mock", "synthesize": True, "run_backend": True,
                "simulate": True, "deterministic": True}


_SYNTH_TCL_TEMPLATE = """# generated synthesis wrapper
yosys -import
{reads}
hierarchy -check -top {top}
synth -top {top}
abc -script {abc_path}
opt_clean
tee -o {stat_path} stat
write_verilog -noattr {netlist_path}
"""


def _run_tool(cmd: list[str], timeout_s: float, stage: str, log_path: Path,
              cwd: Path | None = None) -> subprocess.CompletedProcess:
    start = time.monotonic()
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True,
                              timeout=timeout_s, cwd=cwd)
    except FileNotFoundError:
        raise ToolEnvironmentError(f"{stage}: executable not found: {cmd[0]}") from None
    except subprocess.TimeoutExpired:
        elapsed = time.monotonic() - start
        raise ToolTimeoutError(f"{stage}: timed out after {elapsed:.1f}s "
                               f"(budget {timeout_s}s)", elapsed_s=elapsed,
                               stage=stage) from None
    log_path.write_text(proc.stdout + "\n--- stderr ---\n" + proc.stderr,
                        encoding="utf-8")
    if proc.returncode != 0:
        tail = "\n".join(proc.stderr.splitlines()[-50:])
        raise ToolFailureError(f"{stage}: exit code {proc.returncode}",
                               stage=stage, stderr_tail=tail)
    return proc


class SubprocessBackend(ToolBackend):
    """Drives real tools; every call enforces a wall-clock timeout.

    The place-and-route step runs ``backend_cmd`` with ``{netlist}``,
    ``{workdir}``, ``{top}``, ``{design}``, and ``{clock_period_ns}``
    substituted, and expects the command (or its wrapper script) to leave a
    canonical metrics document at ``<workdir>/metrics.json``.  Normalizing
    flow-specific reports into that document is the wrapper's job because
    upstream report formats drift across flow versions.
    """

    def __init__(self, config: BackendConfig):
        self.config = config

    def synthesize(self, design: Design, strategy: Strategy,
                   workdir: Path) -> tuple[Path, SynthStats]:
        workdir = _prepare_workdir(Path(workdir))
        _write_constraints(design, workdir)
        _resolve_script(design, strategy, workdir)
        for src in design.rtl_sources:
            if not Path(src).exists():
                raise ToolEnvironmentError(f"RTL source not found: {src}")
        netlist = workdir / "netlist.v"
        stat_path = workdir / "logs" / "yosys_stat.txt"
        tcl = _SYNTH_TCL_TEMPLATE.format(
            reads="\n".join(f"read_verilog {src}" for src in design.rtl_sources),
            top=design.top_module,
            abc_path=workdir / "strategy.abc",
            stat_path=stat_path,
            netlist_path=netlist,
        )
        tcl_path = workdir / "synth.tcl"
        tcl_path.write_text(tcl, encoding="utf-8")
        _run_tool([self.config.yosys_cmd, "-c", str(tcl_path)],
                  self.config.synth_timeout_s, "synthesis",
                  workdir / "logs" / "synth.log")
        if not netlist.exists():
            raise ToolFailureError("synthesis: netlist was not written",
                                   stage="synthesis")
        stats = parse_yosys_stat(stat_path.read_text(encoding="utf-8"), format="plain")
        return netlist, stats

    def run_backend(self, netlist: Path, design: Design, workdir: Path) -> BackendMetrics:
        if not self.config.backend_cmd:
            raise ToolEnvironmentError(
                "backend_cmd is not configured; set it to the flow-runner command")
        workdir = _prepare_workdir(Path(workdir))
        cmd = [part.format(netlist=netlist, workdir=workdir, top=design.top_module,
                           design=design.name, clock_period_ns=design.clock_period_ns)
               for part in shlex.split(self.config.backend_cmd)]
        _run_tool(cmd, self.config.backend_timeout_s, "backend",
                  workdir / "logs" / "backend.log")
        doc = workdir / "metrics.json"
        if not doc.exists():
            raise MalformedReportError(
                f"backend flow left no metrics document at {doc}")
        return parse_metrics_doc(doc.read_text(encoding="utf-8"))

    def simulate(self, design: Design, workdir: Path) -> SimResult:
        if design.testbench is None:
            raise PreconditionError(f"design {design.name} has no testbench")
        workdir = _prepare_workdir(Path(workdir))
        sim_bin = workdir / "sim.vvp"
        compile_cmd = [self.config.iverilog_cmd, "-o", str(sim_bin),
                       *design.rtl_sources, design.testbench]
        _run_tool(compile_cmd, self.config.sim_timeout_s, "sim-compile",
                  workdir / "logs" / "sim_compile.log")
        log = workdir / "logs" / "sim.log"
        proc = _run_tool([self.config.vvp_cmd, str(sim_bin)],
                         self.config.sim_timeout_s, "simulation", log, cwd=workdir)
        passed = "FAIL" not in proc.stdout
        vcds = sorted(workdir.glob("*.vcd"))
        return SimResult(passed=passed, log_path=str(log),
                         vcd_path=str(vcds[0]) if vcds else None)

    def capabilities(self) -> dict:
        return {"mode": "real", "synthesize": shutil.which(self.config.yosys_cmd) is not None,
                "run_backend": bool(self.config.backend_cmd),
                "simulate": shutil.which(self.config.iverilog_cmd) is not None,
                "deterministic": False}


def make_backend(config: BackendConfig) -> ToolBackend:
    """Instantiate the backend selected by ``config.mode``."""
    if config.mode == "mock":
        params = None
        if config.mock_a0 is not None and config.mock_d0 is not None:
            params = MockModelParams(base_area_um2=config.mock_a0,
                                     base_delay_ns=config.mock_d0)
        return MockBackend(params)
    if config.mode == "real":
        return SubprocessBackend(config)
    raise ToolEnvironmentError(f"unknown backend mode {config.mode!r}")


def evaluate_strategy(backend: ToolBackend, design: Design, strategy: Strategy,
                      workdir: Path) -> BackendMetrics:
    """Synthesize then run the backend flow in one workdir."""
    netlist, _ = backend.synthesize(design, strategy, Path(workdir))
    return backend.run_backend(netlist, design, Path(workdir))
