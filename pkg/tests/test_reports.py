from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from eda_loop.errors import EdaLoopError, MalformedReportError
from eda_loop.metrics import BackendMetrics
from eda_loop.reports import (emit_metrics_doc, parse_metrics_doc,
                              parse_sta_report, parse_yosys_stat)


class TestYosysStat:
    def test_structured_fixture(self):
        doc = json.dumps({
            "creator": "synthesis tool",
            "modules": {"\\top": {"num_cells": 42, "area": 512.5}},
        })
        stats = parse_yosys_stat(doc, format="structured")
        assert stats.num_cells == 42
        assert stats.cell_area_um2 == pytest.approx(512.5)
        assert stats.top_module == "top"

    def test_structured_design_aggregate(self):
        doc = json.dumps({
            "modules": {"\\a": {"num_cells": 1}, "\\b": {"num_cells": 2}},
            "design": {"num_cells": 3},
        })
        stats = parse_yosys_stat(doc, format="structured")
        assert stats.num_cells == 3
        assert stats.cell_area_um2 is None

    def test_plain_fixture(self):
        stats = parse_yosys_stat("   Number of cells:  7\n", format="plain")
        assert stats.num_cells == 7
        assert stats.cell_area_um2 is None

    def test_plain_with_area_line(self):
        text = ("   Number of cells:              12\n"
                "   Chip area for module '\\counter': 98.7\n")
        stats = parse_yosys_stat(text, format="plain")
        assert stats.num_cells == 12
        assert stats.cell_area_um2 == pytest.approx(98.7)
        assert stats.top_module == "counter"

    def test_missing_cells_is_malformed(self):
        with pytest.raises(MalformedReportError):
            parse_yosys_stat("nothing useful here", format="plain")
        with pytest.raises(MalformedReportError):
            parse_yosys_stat(json.dumps({"modules": {"\\t": {}}}), format="structured")

    def test_negative_count_is_malformed(self):
        with pytest.raises(MalformedReportError):
            parse_yosys_stat("Number of cells: -3", format="plain")
        with pytest.raises(MalformedReportError):
            parse_yosys_stat(json.dumps({"modules": {"\\t": {"num_cells": -1}}}),
                             format="structured")


class TestStaReport:
    def test_violating_report(self):
        wns, tns, cp = parse_sta_report("wns -0.12\ntns -1.20\ncritical_path 0.88\n")
        assert (wns, tns, cp) == (-0.12, -1.20, 0.88)

    def test_missing_tns_defaults_when_met(self):
        wns, tns, cp = parse_sta_report("wns 0.50\ncritical_path 0.86\n")
        assert (wns, tns, cp) == (0.50, 0.0, 0.86)

    def test_first_occurrence_wins(self):
        text = "wns -0.1\nwns -9.9\ntns -0.5\ncritical_path 1.0\n"
        wns, _, _ = parse_sta_report(text)
        assert wns == -0.1

    def test_comments_ignored(self):
        text = "# header\nwns 0.2  # inline\ncritical_path 0.9\n"
        wns, tns, cp = parse_sta_report(text)
        assert (wns, tns, cp) == (0.2, 0.0, 0.9)

    def test_no_wns_line_is_malformed(self):
        with pytest.raises(MalformedReportError):
            parse_sta_report("critical_path 0.9\n")

    def test_missing_tns_with_violation_is_malformed(self):
        with pytest.raises(MalformedReportError):
            parse_sta_report("wns -0.5\ncritical_path 1.2\n")


CANONICAL_DOC = {
    "area_um2": 3913.75,
    "critical_path_ns": 0.86,
    "total_power_uw": 0.000538,
    "wns_ns": 0.14,
    "tns_ns": 0.0,
    "drc_violations": 0,
    "runtime_s": 61.5,
}


class TestMetricsDoc:
    def test_canonical_document(self):
        m = parse_metrics_doc(json.dumps(CANONICAL_DOC))
        assert m.area_um2 == pytest.approx(3913.75)
        assert m.critical_path_ns == pytest.approx(0.86)
        assert m.total_power_uw == pytest.approx(0.000538)

    def test_unknown_keys_ignored(self):
        doc = dict(CANONICAL_DOC, congestion=0.4, stage="route")
        m = parse_metrics_doc(json.dumps(doc))
        assert m.area_um2 == pytest.approx(3913.75)

    def test_missing_keys_all_named(self):
        doc = dict(CANONICAL_DOC)
        del doc["area_um2"], doc["wns_ns"]
        with pytest.raises(MalformedReportError) as exc:
            parse_metrics_doc(json.dumps(doc))
        assert "area_um2" in str(exc.value) and "wns_ns" in str(exc.value)

    def test_non_numeric_value_names_key(self):
        doc = dict(CANONICAL_DOC, area_um2="big")
        with pytest.raises(MalformedReportError) as exc:
            parse_metrics_doc(json.dumps(doc))
        assert "area_um2" in str(exc.value)

    def test_invariant_violations_are_structured(self):
        doc = dict(CANONICAL_DOC, tns_ns=1.0)
        with pytest.raises(MalformedReportError):
            parse_metrics_doc(json.dumps(doc))

    def test_not_json(self):
        with pytest.raises(MalformedReportError):
            parse_metrics_doc("not a doc")


@st.composite
def metrics_strategy(draw):
    wns = draw(st.floats(min_value=-5.0, max_value=5.0))
    tns = 0.0 if wns >= 0 else draw(st.floats(min_value=-50.0, max_value=0.0))
    return BackendMetrics(
        area_um2=draw(st.floats(min_value=0.0, max_value=1e6)),
        critical_path_ns=draw(st.floats(min_value=1e-3, max_value=100.0)),
        total_power_uw=draw(st.floats(min_value=0.0, max_value=1e4)),
        wns_ns=wns,
        tns_ns=tns,
        drc_violations=draw(st.integers(min_value=0, max_value=10)),
        runtime_s=draw(st.floats(min_value=0.0, max_value=1e5)),
    )


class TestRoundTripAndFuzz:
    @settings(max_examples=200, deadline=None)
    @given(m=metrics_strategy())
    def test_emit_parse_identity(self, m):
        assert parse_metrics_doc(emit_metrics_doc(m)) == m

    @settings(max_examples=400, deadline=None)
    @given(text=st.text(max_size=200))
    def test_parsers_never_panic(self, text):
        for parser in (parse_metrics_doc, parse_sta_report,
                       lambda t: parse_yosys_stat(t, format="plain"),
                       lambda t: parse_yosys_stat(t, format="structured")):
            try:
                parser(text)
            except EdaLoopError:
                pass
