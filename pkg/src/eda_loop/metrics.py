"""Post-layout metric model, objective scoring, and comparison tables.

Metrics are immutable value objects validated at construction.  Scores are
"lower is better" throughout: TIMING scores critical path (ns), AREA scores
cell area (um^2), BALANCED scores the geometric mean of delay and area each
normalized to a reference point, so the reference scores exactly 1.0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .errors import InvalidMetricsError, InvalidReferenceError

# Strict-improvement margin for acceptance, in score units.  Prevents
# float-noise candidates from churning the baseline.
ACCEPT_EPSILON = 1e-6


class Objective(Enum):
    TIMING = "timing"
    AREA = "area"
    BALANCED = "balanced"


@dataclass(frozen=True)
class BackendMetrics:
    """Ground-truth numbers from one backend (place-and-route) evaluation.

    Units are fixed by field name: um^2, ns, uW, seconds.  ``tns_ns`` is
    never positive and is zero whenever ``wns_ns`` is nonnegative.
    """

    area_um2: float
    critical_path_ns: float
    total_power_uw: float
    wns_ns: float
    tns_ns: float
    drc_violations: int
    runtime_s: float

    def __post_init__(self):
        for name in ("area_um2", "critical_path_ns", "total_power_uw",
                     "wns_ns", "tns_ns", "runtime_s"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise InvalidMetricsError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value):
                raise InvalidMetricsError(f"{name} must be finite, got {value!r}")
        if self.area_um2 < 0:
            raise InvalidMetricsError(f"area_um2 must be nonnegative, got {self.area_um2}")
        if self.critical_path_ns <= 0:
            raise InvalidMetricsError(
                f"critical_path_ns must be positive, got {self.critical_path_ns}")
        if self.total_power_uw < 0:
            raise InvalidMetricsError(
                f"total_power_uw must be nonnegative, got {self.total_power_uw}")
        if self.runtime_s < 0:
            raise InvalidMetricsError(f"runtime_s must be nonnegative, got {self.runtime_s}")
        if self.tns_ns > 0:
            raise InvalidMetricsError(f"tns_ns must be nonpositive, got {self.tns_ns}")
        if self.wns_ns >= 0 and self.tns_ns != 0:
            raise InvalidMetricsError(
                f"tns_ns must be 0 when wns_ns >= 0, got wns={self.wns_ns} tns={self.tns_ns}")
        if not isinstance(self.drc_violations, int) or isinstance(self.drc_violations, bool):
            raise InvalidMetricsError(
                f"drc_violations must be an integer, got {self.drc_violations!r}")
        if self.drc_violations < 0:
            raise InvalidMetricsError(
                f"drc_violations must be nonnegative, got {self.drc_violations}")


@dataclass(frozen=True)
class ReferencePoint:
    """Normalization anchor for BALANCED scoring, fixed after the sweep."""

    delay_ref_ns: float
    area_ref_um2: float

    def __post_init__(self):
        for name in ("delay_ref_ns", "area_ref_um2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) \
                    or not math.isfinite(value) or value <= 0:
                raise InvalidReferenceError(f"{name} must be strictly positive, got {value!r}")


def score(m: BackendMetrics, obj: Objective, ref: ReferencePoint) -> float:
    """Objective score of ``m``; lower is better.

    BALANCED is sqrt((delay/delay_ref) * (area/area_ref)), which is 1.0
    exactly at the reference point and unit-free.
    """
    if ref.delay_ref_ns <= 0 or ref.area_ref_um2 <= 0:
        raise InvalidReferenceError("reference point must be strictly positive")
    if obj is Objective.TIMING:
        return m.critical_path_ns
    if obj is Objective.AREA:
        return m.area_um2
    return math.sqrt((m.critical_path_ns / ref.delay_ref_ns)
                     * (m.area_um2 / ref.area_ref_um2))


@dataclass(frozen=True)
class ComparisonResult:
    """Outcome of a candidate-vs-baseline acceptance check.

    ``primary_delta`` is the change in the scored quantity (candidate minus
    baseline; negative means the candidate improved).  ``secondary_delta``
    is the off-objective change: area for TIMING, delay for AREA and
    BALANCED.
    """

    accepted: bool
    primary_delta: float
    secondary_delta: float


def compare(candidate: BackendMetrics, baseline: BackendMetrics,
            obj: Objective, ref: ReferencePoint) -> ComparisonResult:
    """Accept ``candidate`` iff it strictly improves the objective score
    by more than ``ACCEPT_EPSILON`` without adding DRC violations."""
    cand_score = score(candidate, obj, ref)
    base_score = score(baseline, obj, ref)
    accepted = (cand_score < base_score - ACCEPT_EPSILON
                and candidate.drc_violations <= baseline.drc_violations)
    primary = cand_score - base_score
    if obj is Objective.TIMING:
        secondary = candidate.area_um2 - baseline.area_um2
    else:
        secondary = candidate.critical_path_ns - baseline.critical_path_ns
    return ComparisonResult(accepted=accepted, primary_delta=primary,
                            secondary_delta=secondary)


def geomean(xs: Sequence[float]) -> float:
    """Geometric mean via exp(mean(ln x)); full precision, no rounding."""
    if not xs:
        raise InvalidMetricsError("geomean of an empty sequence")
    for x in xs:
        if not isinstance(x, (int, float)) or isinstance(x, bool) \
                or not math.isfinite(x) or x <= 0:
            raise InvalidMetricsError(f"geomean requires positive finite values, got {x!r}")
    return math.exp(math.fsum(math.log(x) for x in xs) / len(xs))


@dataclass(frozen=True)
class RatioTable:
    """Per-design comparison grid with GeoMean and Ratio summary rows.

    Columns are grouped: group g spans ``columns[g*group_size:(g+1)*group_size]``
    and ratios inside a group are normalized to the group's first column.
    """

    designs: tuple[str, ...]
    columns: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]  # one row per design
    group_size: int

    @property
    def geomeans(self) -> tuple[float, ...]:
        cols = list(zip(*self.values))
        return tuple(geomean(c) for c in cols)

    @property
    def ratios(self) -> tuple[float, ...]:
        gms = self.geomeans
        out = []
        for i, g in enumerate(gms):
            base = gms[(i // self.group_size) * self.group_size]
            out.append(g / base)
        return tuple(out)


def ratio_table(designs: Sequence[str], columns: Sequence[str],
                rows: Sequence[Sequence[float]], group_size: int = 3) -> RatioTable:
    """Build a comparison table from per-design rows.

    Every row must have one value per column and all values must be
    positive; the first column of each ``group_size`` block is that
    block's normalization base.
    """
    if len(designs) != len(rows):
        raise InvalidMetricsError(
            f"got {len(designs)} design names but {len(rows)} rows")
    if len(columns) % group_size != 0:
        raise InvalidMetricsError(
            f"{len(columns)} columns do not divide into groups of {group_size}")
    for name, row in zip(designs, rows):
        if len(row) != len(columns):
            raise InvalidMetricsError(
                f"row {name!r} has {len(row)} values, expected {len(columns)}")
        for v in row:
            if not math.isfinite(v) or v <= 0:
                raise InvalidMetricsError(f"row {name!r} has nonpositive value {v!r}")
    return RatioTable(designs=tuple(designs), columns=tuple(columns),
                      values=tuple(tuple(float(v) for v in row) for row in rows),
                      group_size=group_size)


def _fmt(value: float) -> str:
    # Display rounding is 2 decimals for ns, um^2, and ratios alike.
    return f"{value:.2f}"


def format_table_text(table: RatioTable) -> str:
    """Aligned UTF-8 text rendering with GeoMean and Ratio rows."""
    header = ["design"] + list(table.columns)
    body = [[name] + [_fmt(v) for v in row]
            for name, row in zip(table.designs, table.values)]
    body.append(["GeoMean"] + [_fmt(v) for v in table.geomeans])
    body.append(["Ratio"] + [_fmt(v) for v in table.ratios])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])]
        cells += [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_table_csv(table: RatioTable) -> str:
    """CSV rendering; same numbers (2-decimal display) as the text form."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["design"] + list(table.columns))
    for name, row in zip(table.designs, table.values):
        writer.writerow([name] + [_fmt(v) for v in row])
    writer.writerow(["GeoMean"] + [_fmt(v) for v in table.geomeans])
    writer.writerow(["Ratio"] + [_fmt(v) for v in table.ratios])
    return buf.getvalue()
