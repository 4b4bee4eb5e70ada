"""Three-phase backend-aware optimization loop.

Phase 1 sweeps the nine fixed strategies to establish a baseline and the
normalization reference (per-metric sweep minima).  Phase 2 asks an advisor
for a candidate script that has not been tried yet.  Phase 3 executes
candidates, accepts strict improvements, and persists every record to
``history.json`` before the next proposal so a killed run resumes cleanly.

Failed backend runs record their script hash with a failed marker (no
metrics record) so the advisor cannot re-propose a script that crashes the
tool.  Baseline score is non-increasing over a run by construction.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .abc_script import canonical_hash
from .advisor import AdvisorProposal, AdvisorRequest, RecordSummary, heuristic_propose
from .backend import (FIXED_STRATEGIES, CustomStrategy, Design, Strategy, ToolBackend,
                      evaluate_strategy, expand_strategy, strategy_from_json,
                      strategy_to_json)
from .docstore import DocStore
from .errors import (EdaLoopError, HistoryError, PreconditionError,
                     ProposalsExhaustedError)
from .metrics import BackendMetrics, Objective, ReferencePoint, compare, score
from .reports import METRICS_DOC_KEYS

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_CONSECUTIVE_FAILURES = 3


class Phase(Enum):
    SWEEP = "SWEEP"
    REFINE = "REFINE"


class ConvergenceDecision(Enum):
    CONTINUE = "CONTINUE"
    CONVERGED_TARGET = "CONVERGED_TARGET"
    CONVERGED_PATIENCE = "CONVERGED_PATIENCE"
    STOPPED_MAX_ITER = "STOPPED_MAX_ITER"


class RunStatus(Enum):
    RUNNING = "running"
    CONVERGED_TARGET = "converged_target"
    CONVERGED_PATIENCE = "converged_patience"
    STOPPED_MAX_ITER = "stopped_max_iter"
    EXHAUSTED_PROPOSALS = "exhausted_proposals"
    ABORTED = "aborted"

    @property
    def converged(self) -> bool:
        return self not in (RunStatus.RUNNING, RunStatus.ABORTED)


_DECISION_TO_STATUS = {
    ConvergenceDecision.CONVERGED_TARGET: RunStatus.CONVERGED_TARGET,
    ConvergenceDecision.CONVERGED_PATIENCE: RunStatus.CONVERGED_PATIENCE,
    ConvergenceDecision.STOPPED_MAX_ITER: RunStatus.STOPPED_MAX_ITER,
}


@dataclass(frozen=True)
class IterationRecord:
    index: int
    strategy: Strategy
    script_hash: str
    metrics: BackendMetrics
    accepted: bool
    phase: Phase
    advisor_provenance: str | None = None


@dataclass
class LoopConfig:
    max_iterations: int = 10
    patience: int = 3
    target: float | None = None
    duplicate_retries: int = 3

    def __post_init__(self):
        if self.max_iterations < 1 or self.patience < 1 or self.duplicate_retries < 1:
            raise PreconditionError("loop parameters must be positive")
        if self.target is not None and self.target <= 0:
            raise PreconditionError("target score must be positive")


@dataclass
class OptimizationHistory:
    design_name: str
    objective: Objective
    reference: ReferencePoint | None = None
    records: list[IterationRecord] = field(default_factory=list)
    baseline_index: int = 0
    tried_hashes: set[str] = field(default_factory=set)
    failed_hashes: set[str] = field(default_factory=set)
    status: RunStatus = RunStatus.RUNNING

    @property
    def baseline_record(self) -> IterationRecord:
        return self.records[self.baseline_index]

    def refine_records(self) -> list[IterationRecord]:
        return [r for r in self.records if r.phase is Phase.REFINE]

    def sweep_records(self) -> list[IterationRecord]:
        return [r for r in self.records if r.phase is Phase.SWEEP]

    def baseline_score(self) -> float:
        if self.reference is None:
            raise PreconditionError("no reference point yet; run the sweep first")
        return score(self.baseline_record.metrics, self.objective, self.reference)

    def sweep_best_index(self) -> int:
        """Index of the sweep-phase baseline; exact score ties go to the
        later strategy in DELAY 0-4, AREA 0-3 order."""
        sweep = self.sweep_records()
        if not sweep:
            return 0
        assert self.reference is not None
        best = sweep[0].index
        best_score = score(sweep[0].metrics, self.objective, self.reference)
        for rec in sweep[1:]:
            s = score(rec.metrics, self.objective, self.reference)
            if s <= best_score:
                best, best_score = rec.index, s
        return best


# --- persistence --------------------------------------------------------------

def _metrics_to_json(m: BackendMetrics) -> dict:
    return {key: getattr(m, key) for key in METRICS_DOC_KEYS}


def _metrics_from_json(doc: dict) -> BackendMetrics:
    return BackendMetrics(
        area_um2=float(doc["area_um2"]),
        critical_path_ns=float(doc["critical_path_ns"]),
        total_power_uw=float(doc["total_power_uw"]),
        wns_ns=float(doc["wns_ns"]),
        tns_ns=float(doc["tns_ns"]),
        drc_violations=int(doc["drc_violations"]),
        runtime_s=float(doc["runtime_s"]),
    )


def history_to_json(history: OptimizationHistory) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "design_name": history.design_name,
        "objective": history.objective.value,
        "reference": (None if history.reference is None else
                      {"delay_ref_ns": history.reference.delay_ref_ns,
                       "area_ref_um2": history.reference.area_ref_um2}),
        "baseline_index": history.baseline_index,
        "status": history.status.value,
        "tried_hashes": sorted(history.tried_hashes),
        "failed_hashes": sorted(history.failed_hashes),
        "records": [
            {
                "index": r.index,
                "strategy": strategy_to_json(r.strategy),
                "script_hash": r.script_hash,
                "metrics": _metrics_to_json(r.metrics),
                "accepted": r.accepted,
                "phase": r.phase.value,
                "advisor_provenance": r.advisor_provenance,
            }
            for r in history.records
        ],
    }


def history_from_json(doc: dict) -> OptimizationHistory:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise HistoryError(f"unsupported schema_version {doc.get('schema_version')!r}")
    ref = doc.get("reference")
    history = OptimizationHistory(
        design_name=doc["design_name"],
        objective=Objective(doc["objective"]),
        reference=None if ref is None else ReferencePoint(ref["delay_ref_ns"],
                                                          ref["area_ref_um2"]),
        baseline_index=int(doc["baseline_index"]),
        tried_hashes=set(doc.get("tried_hashes", [])),
        failed_hashes=set(doc.get("failed_hashes", [])),
        status=RunStatus(doc.get("status", "running")),
    )
    for i, rec in enumerate(doc.get("records", [])):
        if rec["index"] != i:
            raise HistoryError(f"record {i} has index {rec['index']}; not contiguous")
        history.records.append(IterationRecord(
            index=i,
            strategy=strategy_from_json(rec["strategy"]),
            script_hash=rec["script_hash"],
            metrics=_metrics_from_json(rec["metrics"]),
            accepted=bool(rec["accepted"]),
            phase=Phase(rec["phase"]),
            advisor_provenance=rec.get("advisor_provenance"),
        ))
    _validate_history(history)
    return history


def _validate_history(history: OptimizationHistory) -> None:
    if history.records:
        if not 0 <= history.baseline_index < len(history.records):
            raise HistoryError(f"baseline_index {history.baseline_index} out of range")
        missing = {r.script_hash for r in history.records} - history.tried_hashes
        if missing:
            raise HistoryError(f"tried_hashes missing record hashes: {sorted(missing)}")
        hashes = [r.script_hash for r in history.records]
        if len(set(hashes)) != len(hashes):
            raise HistoryError("duplicate script hashes across records")


def save_history(history: OptimizationHistory, run_dir: Path) -> Path:
    """Atomically persist ``history.json`` under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "history.json"
    tmp = run_dir / "history.json.tmp"
    tmp.write_text(json.dumps(history_to_json(history), indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_history(path: Path) -> OptimizationHistory:
    p = Path(path)
    if p.is_dir():
        p = p / "history.json"
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise HistoryError(f"cannot load history from {p}: {exc}") from None
    return history_from_json(doc)


def new_run_dir(runs_dir: Path, design_name: str, label: str | None = None) -> Path:
    """Create ``runs/<design>/<label>``; default label is a UTC timestamp."""
    if label is None:
        label = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    base = Path(runs_dir) / design_name / label
    candidate = base
    suffix = 1
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


# --- phase 1: fixed-strategy sweep --------------------------------------------

def phase1_sweep(design: Design, backend: ToolBackend, objective: Objective,
                 run_dir: Path) -> tuple[OptimizationHistory, ReferencePoint]:
    """Evaluate all nine fixed strategies; returns the seeded history and
    the reference point (sweep minima).  A tool failure aborts the sweep
    with the partial records already on disk."""
    run_dir = Path(run_dir)
    history = OptimizationHistory(design_name=design.name, objective=objective)
    for i, strategy in enumerate(FIXED_STRATEGIES):
        workdir = run_dir / f"iter_{i}"
        script_hash = canonical_hash(expand_strategy(strategy))
        try:
            metrics = evaluate_strategy(backend, design, strategy, workdir)
        except EdaLoopError:
            save_history(history, run_dir)
            raise
        history.records.append(IterationRecord(
            index=i, strategy=strategy, script_hash=script_hash, metrics=metrics,
            accepted=False, phase=Phase.SWEEP))
        history.tried_hashes.add(script_hash)
        save_history(history, run_dir)
    reference = ReferencePoint(
        delay_ref_ns=min(r.metrics.critical_path_ns for r in history.records),
        area_ref_um2=min(r.metrics.area_um2 for r in history.records))
    history.reference = reference
    history.baseline_index = history.sweep_best_index()
    save_history(history, run_dir)
    logger.info("sweep done for %s: baseline %s", design.name,
                history.baseline_record.strategy.label)
    return history, reference


# --- phase 2: advisor proposal ------------------------------------------------

_OBJECTIVE_QUERIES = {
    Objective.TIMING: "timing critical path delay buffer insertion",
    Objective.AREA: "area recovery remapping cell count reduction",
    Objective.BALANCED: "balance timing area trade-off technology mapping",
}


def _recent_summaries(history: OptimizationHistory, limit: int = 5) -> tuple[RecordSummary, ...]:
    recent = history.records[-limit:]
    return tuple(RecordSummary(index=r.index, area_um2=r.metrics.area_um2,
                               critical_path_ns=r.metrics.critical_path_ns,
                               total_power_uw=r.metrics.total_power_uw,
                               accepted=r.accepted)
                 for r in recent)


def phase2_propose(history: OptimizationHistory, objective: Objective,
                   doc_store: DocStore | None, advisor,
                   duplicate_retries: int = 3,
                   constraints: str = "") -> AdvisorProposal:
    """Obtain a proposal whose canonical hash has not been tried.

    The advisor is re-invoked with a bumped iteration index on duplicates;
    after ``duplicate_retries`` duplicates the deterministic heuristic takes
    over.  When even the heuristic cannot produce a novel script the
    proposal space is exhausted.
    """
    if not history.records:
        raise PreconditionError("phase 2 needs at least one record")
    snippets: tuple[tuple[str, str], ...] = ()
    if doc_store is not None:
        hits = doc_store.query(_OBJECTIVE_QUERIES[objective], k=3)
        snippets = tuple((f"{c.doc_id}#{c.chunk_index}", c.text) for c, _ in hits)
    request = AdvisorRequest(
        objective=objective,
        best_script=expand_strategy(history.baseline_record.strategy),
        recent_records=_recent_summaries(history),
        snippets=snippets,
        constraints=constraints,
        iteration_index=len(history.records),
    )
    base_index = len(history.records)
    for attempt in range(duplicate_retries):
        proposal = advisor.propose(
            dataclasses.replace(request, iteration_index=base_index + attempt))
        if canonical_hash(proposal.script) not in history.tried_hashes:
            return proposal
        logger.debug("duplicate proposal (attempt %d): %s", attempt,
                     canonical_hash(proposal.script))
    # Deterministic fallback; scan further rotation indices for novelty.
    for attempt in range(duplicate_retries, duplicate_retries + 8):
        proposal = heuristic_propose(
            dataclasses.replace(request, iteration_index=base_index + attempt))
        if canonical_hash(proposal.script) not in history.tried_hashes:
            return proposal
    raise ProposalsExhaustedError(
        f"no novel proposal after {duplicate_retries} advisor attempts and "
        "heuristic fallback")


# --- phase 3: iterative refinement --------------------------------------------

def check_convergence(history: OptimizationHistory,
                      config: LoopConfig) -> ConvergenceDecision:
    """Target threshold, then trailing-patience, then iteration budget."""
    if config.target is not None and history.records \
            and history.baseline_score() <= config.target:
        return ConvergenceDecision.CONVERGED_TARGET
    refines = history.refine_records()
    if len(refines) >= config.patience \
            and all(not r.accepted for r in refines[-config.patience:]):
        return ConvergenceDecision.CONVERGED_PATIENCE
    if len(refines) >= config.max_iterations:
        return ConvergenceDecision.STOPPED_MAX_ITER
    return ConvergenceDecision.CONTINUE


def phase3_iterate(design: Design, backend: ToolBackend, advisor,
                   doc_store: DocStore | None, config: LoopConfig,
                   history: OptimizationHistory, run_dir: Path,
                   constraints: str = "",
                   cancel_check: Callable[[], bool] | None = None) -> OptimizationHistory:
    """Propose, execute, compare, record until convergence.

    Every record is persisted before the next proposal.  More than
    ``MAX_CONSECUTIVE_FAILURES`` consecutive backend failures abort the run
    with the history intact; a cancel signal is honored between iterations.
    """
    if history.reference is None:
        raise PreconditionError("phase 3 requires a completed sweep")
    run_dir = Path(run_dir)
    consecutive_failures = 0
    while True:
        if cancel_check is not None and cancel_check():
            history.status = RunStatus.ABORTED
            save_history(history, run_dir)
            return history
        decision = check_convergence(history, config)
        if decision is not ConvergenceDecision.CONTINUE:
            history.status = _DECISION_TO_STATUS[decision]
            save_history(history, run_dir)
            return history
        try:
            proposal = phase2_propose(history, history.objective, doc_store, advisor,
                                      duplicate_retries=config.duplicate_retries,
                                      constraints=constraints)
        except ProposalsExhaustedError:
            history.status = RunStatus.EXHAUSTED_PROPOSALS
            save_history(history, run_dir)
            return history
        strategy: Strategy = CustomStrategy(proposal.script)
        script_hash = canonical_hash(proposal.script)
        workdir = run_dir / f"iter_{len(history.records)}"
        try:
            metrics = evaluate_strategy(backend, design, strategy, workdir)
        except EdaLoopError as exc:
            logger.warning("backend failure on %s: %s", script_hash, exc)
            history.tried_hashes.add(script_hash)
            history.failed_hashes.add(script_hash)
            consecutive_failures += 1
            save_history(history, run_dir)
            if consecutive_failures > MAX_CONSECUTIVE_FAILURES:
                history.status = RunStatus.ABORTED
                save_history(history, run_dir)
                return history
            continue
        consecutive_failures = 0
        outcome = compare(metrics, history.baseline_record.metrics,
                          history.objective, history.reference)
        record = IterationRecord(
            index=len(history.records), strategy=strategy, script_hash=script_hash,
            metrics=metrics, accepted=outcome.accepted, phase=Phase.REFINE,
            advisor_provenance=str(proposal.provenance))
        history.records.append(record)
        history.tried_hashes.add(script_hash)
        if outcome.accepted:
            history.baseline_index = record.index
        save_history(history, run_dir)


def run_optimization(design: Design, backend: ToolBackend, advisor,
                     doc_store: DocStore | None, objective: Objective,
                     config: LoopConfig, run_dir: Path, constraints: str = "",
                     cancel_check: Callable[[], bool] | None = None) -> OptimizationHistory:
    """Full three-phase run in one run directory."""
    history, _ = phase1_sweep(design, backend, objective, Path(run_dir))
    return phase3_iterate(design, backend, advisor, doc_store, config, history,
                          Path(run_dir), constraints=constraints,
                          cancel_check=cancel_check)


# --- reporting ----------------------------------------------------------------

def summarize_deltas(history: OptimizationHistory) -> list[str]:
    """One line per accepted refinement.

    Timing deltas are cumulative against the baseline that started the
    refinement phase; area deltas are percentages against the immediately
    preceding record.  This is the only pairing consistent with reporting
    both a multi-iteration timing gain and a single-step area reduction.
    """
    if len(history.records) < 2:
        raise PreconditionError("need at least two records to summarize")
    sweep = history.sweep_records()
    ref_index = history.sweep_best_index() if sweep else history.records[0].index
    ref_metrics = history.records[ref_index].metrics
    lines = []
    for rec in history.refine_records():
        if not rec.accepted:
            continue
        timing_gain = ref_metrics.critical_path_ns - rec.metrics.critical_path_ns
        prev = history.records[rec.index - 1]
        area_pct = (prev.metrics.area_um2 - rec.metrics.area_um2) \
            / prev.metrics.area_um2 * 100.0
        lines.append(f"Iteration {rec.index}: timing improvement {timing_gain:.3f}ns, "
                     f"area reduction {area_pct:.1f}%")
    return lines
