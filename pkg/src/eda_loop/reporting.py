"""Comparison-table assembly from run histories or the bundled fixture CSV.

The CSV interface is fixed: ``design, base_delay_ns, fixed_delay_ns,
mcp_delay_ns, base_area_um2, fixed_area_um2, mcp_area_um2``.  For history
inputs the three columns per metric map to: the sweep baseline, the first
refinement proposal (the single-shot, no-feedback analog), and the final
baseline after refinement; a sweep-only history therefore yields identical
columns and unit ratios.
"""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import MalformedReportError
from .metrics import RatioTable, ratio_table
from .optimizer import OptimizationHistory, load_history

TABLE_COLUMNS = ("base_delay_ns", "fixed_delay_ns", "mcp_delay_ns",
                 "base_area_um2", "fixed_area_um2", "mcp_area_um2")


def bundled_fixture_path() -> Path:
    """The packaged per-design delay/area fixture."""
    return Path(resources.files("eda_loop").joinpath("data/comparison_fixture.csv"))


def table_from_comparison_csv(path: str | Path) -> RatioTable:
    """Load a comparison table from the fixed CSV schema."""
    designs = []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] \
                != ["design", *TABLE_COLUMNS]:
            raise MalformedReportError(
                f"CSV header must be: design, {', '.join(TABLE_COLUMNS)}")
        for line in reader:
            designs.append(line["design"])
            try:
                rows.append([float(line[c]) for c in TABLE_COLUMNS])
            except (TypeError, ValueError):
                raise MalformedReportError(
                    f"non-numeric value in row {line['design']!r}") from None
    if not rows:
        raise MalformedReportError(f"no data rows in {path}")
    return ratio_table(designs, TABLE_COLUMNS, rows, group_size=3)


def _history_row(history: OptimizationHistory) -> tuple[str, list[float]]:
    base = history.records[history.sweep_best_index()].metrics
    refines = history.refine_records()
    fixed = refines[0].metrics if refines else base
    final = history.baseline_record.metrics
    return history.design_name, [
        base.critical_path_ns, fixed.critical_path_ns, final.critical_path_ns,
        base.area_um2, fixed.area_um2, final.area_um2,
    ]


def table_from_histories(histories: Iterable[OptimizationHistory]) -> RatioTable:
    designs = []
    rows = []
    for history in histories:
        name, row = _history_row(history)
        designs.append(name)
        rows.append(row)
    return ratio_table(designs, TABLE_COLUMNS, rows, group_size=3)


def table_from_history_paths(paths: Sequence[str | Path]) -> RatioTable:
    return table_from_histories(load_history(Path(p)) for p in paths)


def sweep_table_lines(history: OptimizationHistory) -> list[str]:
    """One line per sweep record, the baseline starred."""
    lines = []
    for rec in history.sweep_records():
        star = " *" if rec.index == history.baseline_index else ""
        lines.append(f"{rec.strategy.label:8s} delay {rec.metrics.critical_path_ns:9.3f} ns"
                     f"  area {rec.metrics.area_um2:12.2f} um2{star}")
    return lines
