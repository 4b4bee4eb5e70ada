"""Backend-aware synthesis optimization: protocol server, CLI, and core loop."""

from .abc_script import (AbcCommand, AbcScript, canonical_hash, extract_features,
                         parse_script, serialize, substitute)
from .advisor import (AdvisorProposal, AdvisorRequest, HeuristicAdvisor,
                      RemoteAdvisor, RemoteConfig, build_prompt, extract_script,
                      heuristic_propose, remote_propose)
from .backend import (CustomStrategy, Design, FixedStrategy, MockBackend,
                      MockModelParams, Strategy, StrategyKind, SubprocessBackend,
                      ToolBackend, expand_strategy, make_backend, mock_evaluate,
                      mock_oracle)
from .docstore import DocStore
from .metrics import (BackendMetrics, Objective, ReferencePoint, compare, geomean,
                      ratio_table, score)
from .optimizer import (ConvergenceDecision, IterationRecord, LoopConfig,
                        OptimizationHistory, RunStatus, check_convergence,
                        load_history, phase1_sweep, phase2_propose, phase3_iterate,
                        run_optimization, save_history, summarize_deltas)
from .reports import (SynthStats, emit_metrics_doc, parse_metrics_doc,
                      parse_sta_report, parse_yosys_stat)

__version__ = "0.1.0"
