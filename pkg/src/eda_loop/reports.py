"""Parsers that normalize raw tool outputs into structured values.

Three surfaces feed the loop: synthesis statistics (structured JSON or the
plain text summary), a minimal canonical STA text format, and the canonical
metrics document.  The metrics document is the single JSON shape every
backend adapter must produce, which keeps the optimizer independent of any
particular flow's report zoo:

    required keys: area_um2, critical_path_ns, total_power_uw, wns_ns,
                   tns_ns, drc_violations, runtime_s

Canonical STA text: one ``wns <real>`` line, optional ``tns <real>``,
one ``critical_path <real>``; ``#`` starts a comment; first occurrence of a
key wins.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

from .errors import InvalidMetricsError, MalformedReportError
from .metrics import BackendMetrics

METRICS_DOC_KEYS = ("area_um2", "critical_path_ns", "total_power_uw",
                    "wns_ns", "tns_ns", "drc_violations", "runtime_s")


@dataclass(frozen=True)
class SynthStats:
    num_cells: int
    cell_area_um2: float | None = None
    top_module: str = ""


def parse_yosys_stat(text: str, format: str = "plain") -> SynthStats:
    """Extract cell count / area from synthesis statistics output.

    ``structured`` reads the tool's JSON stat dump (``design`` aggregate
    when present, otherwise the sole module entry).  ``plain`` scans the
    human-readable summary for ``Number of cells:`` and
    ``Chip area for module`` lines.
    """
    if format == "structured":
        return _parse_stat_json(text)
    if format == "plain":
        return _parse_stat_plain(text)
    raise ValueError(f"unknown stat format {format!r}")


def _check_cells(value) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise MalformedReportError(f"num_cells must be an integer, got {value!r}")
    if value < 0:
        raise MalformedReportError(f"num_cells must be nonnegative, got {value}")
    return value


def _parse_stat_json(text: str) -> SynthStats:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedReportError(f"stat output is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedReportError("stat output is not a JSON object")
    modules = doc.get("modules") or {}
    source = doc.get("design")
    top = ""
    if len(modules) == 1:
        top = next(iter(modules)).lstrip("\\")
    if source is None:
        if len(modules) != 1:
            raise MalformedReportError("stat output has no 'design' aggregate")
        source = next(iter(modules.values()))
    if "num_cells" not in source:
        raise MalformedReportError("stat output is missing num_cells")
    num_cells = _check_cells(source["num_cells"])
    area = source.get("area")
    if area is not None:
        area = float(area)
    return SynthStats(num_cells=num_cells, cell_area_um2=area, top_module=top)


_CELLS_RE = re.compile(r"Number of cells:\s*(-?\d+)")
_AREA_RE = re.compile(r"Chip area for (?:top )?module\s+'\\?([^']*)':\s*([-\d.eE+]+)")


def _parse_stat_plain(text: str) -> SynthStats:
    num_cells = None
    area = None
    top = ""
    for line in text.splitlines():
        if num_cells is None:
            m = _CELLS_RE.search(line)
            if m:
                num_cells = _check_cells(int(m.group(1)))
                continue
        if area is None:
            m = _AREA_RE.search(line)
            if m:
                top = m.group(1)
                area = float(m.group(2))
    if num_cells is None:
        raise MalformedReportError("no 'Number of cells:' line found")
    return SynthStats(num_cells=num_cells, cell_area_um2=area, top_module=top)


_STA_LINE_RE = re.compile(r"^\s*(wns|tns|critical_path)\s+(\S+)\s*$")


def parse_sta_report(text: str) -> tuple[float, float, float]:
    """Parse canonical STA text into ``(wns_ns, tns_ns, critical_path_ns)``.

    A missing ``tns`` defaults to 0 when ``wns`` is nonnegative; with
    violations present it is required.  Duplicate lines: first wins.
    """
    seen: dict[str, float] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        m = _STA_LINE_RE.match(line)
        if not m or m.group(1) in seen:
            continue
        try:
            seen[m.group(1)] = float(m.group(2))
        except ValueError:
            raise MalformedReportError(
                f"non-numeric value for {m.group(1)}: {m.group(2)!r}") from None
    if "wns" not in seen:
        raise MalformedReportError("no recognizable wns line")
    if "critical_path" not in seen:
        raise MalformedReportError("no recognizable critical_path line")
    wns = seen["wns"]
    if "tns" in seen:
        tns = seen["tns"]
    elif wns >= 0:
        tns = 0.0
    else:
        raise MalformedReportError("tns line required when wns is negative")
    return (wns, tns, seen["critical_path"])


def parse_metrics_doc(text: str) -> BackendMetrics:
    """Parse the canonical metrics document; unknown keys are ignored."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedReportError(f"metrics document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedReportError("metrics document is not a JSON object")
    missing = [k for k in METRICS_DOC_KEYS if k not in doc]
    if missing:
        raise MalformedReportError(f"missing required keys: {', '.join(missing)}")
    values = {}
    for key in METRICS_DOC_KEYS:
        v = doc[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise MalformedReportError(f"key {key!r} must be a finite number, got {v!r}")
        values[key] = v
    drc = values["drc_violations"]
    if drc != int(drc):
        raise MalformedReportError(f"drc_violations must be integral, got {drc!r}")
    try:
        return BackendMetrics(
            area_um2=float(values["area_um2"]),
            critical_path_ns=float(values["critical_path_ns"]),
            total_power_uw=float(values["total_power_uw"]),
            wns_ns=float(values["wns_ns"]),
            tns_ns=float(values["tns_ns"]),
            drc_violations=int(drc),
            runtime_s=float(values["runtime_s"]),
        )
    except InvalidMetricsError as exc:
        raise MalformedReportError(str(exc)) from None


def emit_metrics_doc(m: BackendMetrics) -> str:
    """Serialize metrics to the canonical document; round-trips exactly."""
    doc = {
        "area_um2": m.area_um2,
        "critical_path_ns": m.critical_path_ns,
        "total_power_uw": m.total_power_uw,
        "wns_ns": m.wns_ns,
        "tns_ns": m.tns_ns,
        "drc_violations": m.drc_violations,
        "runtime_s": m.runtime_s,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
