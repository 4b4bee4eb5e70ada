from __future__ import annotations

import os
import stat
import time
from functools import reduce
from pathlib import Path

import pytest

from eda_loop.abc_script import extract_features, parse_script, serialize
from eda_loop.backend import (DEFAULT_CLOCK_PERIOD_NS, FIXED_STRATEGIES,
                              BackendConfig, CustomStrategy, Design,
                              FixedStrategy, MockBackend, MockModelParams,
                              StrategyKind, SubprocessBackend, expand_strategy,
                              fnv1a64, make_backend, mock_evaluate, mock_oracle,
                              strategy_from_json, strategy_to_json)
from eda_loop.errors import (MalformedReportError, PreconditionError,
                             ToolEnvironmentError, ToolFailureError,
                             ToolTimeoutError, UnresolvedPlaceholderError)
from eda_loop.metrics import Objective


def model_oracle(a0, d0, balance, n_buffer, has_dch, n_map, clock=10.0):
    """Independent spelled-out evaluation of the analytic model."""
    delay = d0 * (0.70 + 0.30 * balance) * 0.97 ** n_buffer * (0.92 if has_dch else 1)
    delay = max(delay, 0.30 * d0)
    area = (a0 * (1.30 - 0.25 * balance) * 1.03 ** n_buffer
            * (1.06 if has_dch else 1) * 0.98 ** min(n_map, 3))
    wns = clock - delay
    return delay, area, area * 1.45e-4, wns, 10 * min(0.0, wns)


class TestMockEvaluate:
    def test_single_map_script(self, mock_params):
        m = mock_evaluate(mock_params, CustomStrategy(parse_script("strash;map -B 0.8")))
        delay, area, power, wns, tns = model_oracle(5000.0, 2.00, 0.8, 0, False, 1)
        assert m.critical_path_ns == pytest.approx(delay)
        assert m.critical_path_ns == pytest.approx(1.88)
        assert m.area_um2 == pytest.approx(area)
        assert m.area_um2 == pytest.approx(5390.0)
        assert m.total_power_uw == pytest.approx(power)
        assert (m.wns_ns, m.tns_ns) == (pytest.approx(wns), pytest.approx(tns))

    def test_empty_script_defaults(self, mock_params):
        m = mock_evaluate(mock_params, CustomStrategy(parse_script("")))
        assert m.critical_path_ns == pytest.approx(2.00)
        assert m.area_um2 == pytest.approx(5250.0)

    def test_bitwise_determinism(self, mock_params):
        s = CustomStrategy(parse_script("strash;dch;map -B 0.74;buffer -c -N 4"))
        a = mock_evaluate(mock_params, s, 8.0)
        b = mock_evaluate(mock_params, s, 8.0)
        assert a == b

    def test_delay_floor(self):
        params = MockModelParams(1000.0, 1.0)
        m = mock_evaluate(params, CustomStrategy(parse_script(
            ";".join(["strash"] + ["buffer -c -N 4"] * 60))))
        assert m.critical_path_ns == pytest.approx(0.30)

    def test_violating_clock_gives_negative_slack(self, mock_params):
        m = mock_evaluate(mock_params, CustomStrategy(parse_script("strash")),
                          clock_period_ns=1.0)
        assert m.wns_ns == pytest.approx(1.0 - 2.0)
        assert m.tns_ns == pytest.approx(10 * (1.0 - 2.0))


class TestFixedStrategies:
    def test_nine_strategies(self):
        labels = [s.label for s in FIXED_STRATEGIES]
        assert labels == ["DELAY 0", "DELAY 1", "DELAY 2", "DELAY 3", "DELAY 4",
                          "AREA 0", "AREA 1", "AREA 2", "AREA 3"]

    def test_delay_expansion(self):
        assert serialize(expand_strategy(FixedStrategy(StrategyKind.DELAY, 0))) \
            == "strash;map -B 1.00"
        assert serialize(expand_strategy(FixedStrategy(StrategyKind.DELAY, 1))) \
            == "strash;map -B 0.95;buffer -c -N 4"
        assert serialize(expand_strategy(FixedStrategy(StrategyKind.DELAY, 4))) \
            == ("strash;dch;map -B 0.80;buffer -c -N 4;buffer -c -N 4;"
                "buffer -c -N 4;buffer -c -N 4")

    def test_area_expansion(self):
        assert serialize(expand_strategy(FixedStrategy(StrategyKind.AREA, 0))) \
            == "strash;map -B 1.0"
        script = expand_strategy(FixedStrategy(StrategyKind.AREA, 3))
        assert extract_features(script).n_map == 4

    def test_all_nine_expansions_hash_distinct(self):
        from eda_loop.abc_script import canonical_hash
        hashes = {canonical_hash(expand_strategy(s)) for s in FIXED_STRATEGIES}
        assert len(hashes) == 9

    @pytest.mark.parametrize("kind,level", [
        (StrategyKind.DELAY, 5), (StrategyKind.DELAY, -1), (StrategyKind.AREA, 4),
    ])
    def test_invalid_levels(self, kind, level):
        with pytest.raises(PreconditionError):
            FixedStrategy(kind, level)

    def test_strategy_json_round_trip(self):
        for strategy in (*FIXED_STRATEGIES,
                         CustomStrategy(parse_script("strash;map -B 0.72"))):
            assert strategy_from_json(strategy_to_json(strategy)) == strategy


class TestMockOracle:
    def test_timing_optimum(self, mock_params):
        script, metrics = mock_oracle(mock_params, Objective.TIMING)
        f = extract_features(script)
        assert f.mean_balance == pytest.approx(0.70)
        assert f.n_buffer == 4
        assert f.has_dch is True
        expected = 2.00 * 0.91 * 0.97 ** 4 * 0.92
        assert metrics.critical_path_ns == pytest.approx(expected)

    def test_area_optimum(self, mock_params):
        script, metrics = mock_oracle(mock_params, Objective.AREA)
        f = extract_features(script)
        assert f.mean_balance == pytest.approx(1.00)
        assert f.n_buffer == 0
        assert f.has_dch is False
        assert f.n_map == 3

    def test_grid_of_one(self, mock_params):
        script, metrics = mock_oracle(mock_params, Objective.TIMING,
                                      balances=[0.9], buffers=[1],
                                      dch_options=(True,), maps=(2,))
        f = extract_features(script)
        assert (f.mean_balance, f.n_buffer, f.has_dch, f.n_map) == (0.9, 1, True, 2)

    def test_oracle_matches_exhaustive_argmin(self, mock_params):
        # cross-check with the independently spelled-out model
        _, metrics = mock_oracle(mock_params, Objective.AREA)
        best_area = min(
            model_oracle(5000.0, 2.00, 0.70 + 0.02 * i, nb, dch, nm)[1]
            for i in range(16) for nb in range(5)
            for dch in (False, True) for nm in (1, 2, 3))
        assert metrics.area_um2 == pytest.approx(best_area)

    def test_tradeoff_law_nondegenerate(self, mock_params):
        # with n_map fixed, lowering balance strictly cuts delay, grows area
        for nm in (1, 2, 3):
            for nb in (0, 4):
                evals = [
                    mock_evaluate(mock_params, CustomStrategy(
                        parse_script(f"strash;{';'.join(['map -B %.2f' % (0.70 + 0.02 * i)] * nm)};"
                                     + ";".join(["buffer -c -N 4"] * nb))))
                    for i in range(16)
                ]
                delays = [m.critical_path_ns for m in evals]
                areas = [m.area_um2 for m in evals]
                assert all(a < b for a, b in zip(delays, delays[1:]))
                assert all(a > b for a, b in zip(areas, areas[1:]))


class TestParamDerivation:
    def test_fnv1a64_reference_values(self):
        # independent fold-based implementation as the oracle
        def fold_fnv(data: bytes) -> int:
            return reduce(lambda h, b: ((h ^ b) * 0x100000001B3) & (2 ** 64 - 1),
                          data, 0xCBF29CE484222325)
        for text in ("design_a", "design_b", "module top(); endmodule", ""):
            assert fnv1a64(text.encode()) == fold_fnv(text.encode())

    def test_frozen_derivations(self):
        p = MockModelParams.from_source("design_a")
        assert (p.base_area_um2, p.base_delay_ns) == (2094.0, 1.85)
        p = MockModelParams.from_source("design_b")
        assert (p.base_area_um2, p.base_delay_ns) == (1919.0, 2.01)

    def test_ranges_hold_for_many_seeds(self):
        for i in range(200):
            p = MockModelParams.from_source(f"seed-{i}")
            assert 1000.0 <= p.base_area_um2 <= 10000.0
            assert 0.50 <= p.base_delay_ns <= 2.50

    def test_stability_across_calls(self):
        assert MockModelParams.from_source("abc") == MockModelParams.from_source("abc")

    def test_explicit_params_validated(self):
        with pytest.raises(PreconditionError):
            MockModelParams(0.0, 1.0)


class TestMockBackend:
    def test_workdir_layout_and_dispatch(self, mock_backend, toy_design, tmp_path):
        workdir = tmp_path / "w"
        netlist, stats = mock_backend.synthesize(
            toy_design, FixedStrategy(StrategyKind.DELAY, 2), workdir)
        assert netlist.exists()
        assert (workdir / "strategy.abc").exists()
        assert (workdir / "synth.tcl").exists()
        assert (workdir / "logs").is_dir()
        assert stats.num_cells > 0
        metrics = mock_backend.run_backend(netlist, toy_design, workdir)
        direct = mock_evaluate(MockModelParams(5000.0, 2.00),
                               FixedStrategy(StrategyKind.DELAY, 2),
                               toy_design.clock_period_ns)
        assert metrics == direct
        assert (workdir / "metrics.json").exists()

    def test_hashed_params_from_sources(self, toy_design, tmp_path):
        backend = MockBackend()
        params = backend.params_for(toy_design)
        source = Path(toy_design.rtl_sources[0]).read_text(encoding="utf-8")
        assert params == MockModelParams.from_source(source)

    def test_simulate_requires_testbench(self, mock_backend, toy_design, tmp_path):
        with pytest.raises(PreconditionError):
            mock_backend.simulate(toy_design, tmp_path / "sim")

    def test_simulate_with_testbench(self, mock_backend, and2_design, tmp_path):
        result = mock_backend.simulate(and2_design, tmp_path / "sim")
        assert result.passed is True
        assert Path(result.log_path).exists()

    def test_capabilities(self, mock_backend):
        caps = mock_backend.capabilities()
        assert caps["mode"] == "mock" and caps["deterministic"] is True


def _write_script(path: Path, body: str) -> str:
    path.write_text(body, encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


STUB_SYNTH = """#!/usr/bin/env python3
import re, sys
tcl = open(sys.argv[2]).read()
stat_path = re.search(r"tee -o (\\S+) stat", tcl).group(1)
netlist = re.search(r"write_verilog -noattr (\\S+)", tcl).group(1)
open(stat_path, "w").write("Number of cells:   5\\n"
                           "Chip area for module '\\\\toy': 123.5\\n")
open(netlist, "w").write("// stub netlist\\n")
"""


class TestSubprocessBackend:
    def test_synthesize_with_stub_tool(self, toy_design, tmp_path):
        yosys = _write_script(tmp_path / "yosys-stub", STUB_SYNTH)
        backend = SubprocessBackend(BackendConfig(mode="real", yosys_cmd=yosys))
        netlist, stats = backend.synthesize(
            toy_design, FixedStrategy(StrategyKind.DELAY, 0), tmp_path / "w")
        assert netlist.read_text().startswith("// stub")
        assert stats.num_cells == 5
        assert stats.cell_area_um2 == pytest.approx(123.5)
        assert (tmp_path / "w" / "strategy.abc").exists()
        assert (tmp_path / "w" / "design.sdc").exists()

    def test_tool_missing_is_environment_error(self, toy_design, tmp_path):
        backend = SubprocessBackend(BackendConfig(
            mode="real", yosys_cmd=str(tmp_path / "no-such-tool")))
        with pytest.raises(ToolEnvironmentError):
            backend.synthesize(toy_design, FixedStrategy(StrategyKind.DELAY, 0),
                               tmp_path / "w")

    def test_nonzero_exit_carries_stderr_tail(self, toy_design, tmp_path):
        yosys = _write_script(tmp_path / "bad-tool",
                              "#!/bin/sh\necho boom >&2\nexit 3\n")
        backend = SubprocessBackend(BackendConfig(mode="real", yosys_cmd=yosys))
        with pytest.raises(ToolFailureError) as exc:
            backend.synthesize(toy_design, FixedStrategy(StrategyKind.DELAY, 0),
                               tmp_path / "w")
        assert "boom" in exc.value.stderr_tail

    def test_timeout_enforced_within_budget(self, toy_design, tmp_path):
        yosys = _write_script(tmp_path / "sleepy", "#!/bin/sh\nsleep 1000\n")
        backend = SubprocessBackend(BackendConfig(mode="real", yosys_cmd=yosys,
                                                  synth_timeout_s=1.0))
        start = time.monotonic()
        with pytest.raises(ToolTimeoutError) as exc:
            backend.synthesize(toy_design, FixedStrategy(StrategyKind.DELAY, 0),
                               tmp_path / "w")
        assert time.monotonic() - start < 1.0 + 2.0
        assert exc.value.elapsed_s >= 1.0

    def test_unwritable_workdir(self, toy_design, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        os.chmod(locked, 0o555)
        backend = SubprocessBackend(BackendConfig(mode="real"))
        try:
            with pytest.raises(ToolEnvironmentError):
                backend.synthesize(toy_design, FixedStrategy(StrategyKind.DELAY, 0),
                                   locked / "w")
        finally:
            os.chmod(locked, 0o755)

    def test_unresolved_placeholder_before_any_spawn(self, toy_design, tmp_path):
        marker = tmp_path / "spawned"
        yosys = _write_script(tmp_path / "marking-tool",
                              f"#!/bin/sh\ntouch {marker}\n")
        backend = SubprocessBackend(BackendConfig(mode="real", yosys_cmd=yosys))
        strategy = CustomStrategy(parse_script("strash;${mystery}"))
        with pytest.raises(UnresolvedPlaceholderError):
            backend.synthesize(toy_design, strategy, tmp_path / "w")
        assert not marker.exists()

    def test_missing_flow_runner_names_binary(self, toy_design, tmp_path):
        backend = SubprocessBackend(BackendConfig(mode="real", backend_cmd=""))
        with pytest.raises(ToolEnvironmentError) as exc:
            backend.run_backend(tmp_path / "n.v", toy_design, tmp_path / "w")
        assert "backend_cmd" in str(exc.value)
        backend = SubprocessBackend(BackendConfig(
            mode="real", backend_cmd="definitely-not-a-flow {netlist}"))
        with pytest.raises(ToolEnvironmentError) as exc:
            backend.run_backend(tmp_path / "n.v", toy_design, tmp_path / "w")
        assert "definitely-not-a-flow" in str(exc.value)

    def test_flow_without_metrics_doc_is_malformed(self, toy_design, tmp_path):
        flow = _write_script(tmp_path / "noop-flow", "#!/bin/sh\nexit 0\n")
        backend = SubprocessBackend(BackendConfig(mode="real",
                                                  backend_cmd=f"{flow} {{netlist}}"))
        with pytest.raises(MalformedReportError):
            backend.run_backend(tmp_path / "n.v", toy_design, tmp_path / "w")

    def test_simulation_fail_token_rule(self, and2_design, tmp_path):
        iverilog = _write_script(tmp_path / "iverilog-stub",
                                 "#!/bin/sh\n# args: -o out sources...\ntouch $2\n")
        vvp = _write_script(tmp_path / "vvp-stub",
                            "#!/bin/sh\necho 'something FAILed? no: FAIL'\nexit 0\n")
        backend = SubprocessBackend(BackendConfig(mode="real", iverilog_cmd=iverilog,
                                                  vvp_cmd=vvp))
        result = backend.simulate(and2_design, tmp_path / "sim")
        assert result.passed is False

    def test_simulation_pass(self, and2_design, tmp_path):
        iverilog = _write_script(tmp_path / "iverilog-stub", "#!/bin/sh\ntouch $2\n")
        vvp = _write_script(tmp_path / "vvp-stub", "#!/bin/sh\necho PASS\n")
        backend = SubprocessBackend(BackendConfig(mode="real", iverilog_cmd=iverilog,
                                                  vvp_cmd=vvp))
        result = backend.simulate(and2_design, tmp_path / "sim")
        assert result.passed is True

    @pytest.mark.skipif(not os.environ.get("EDA_LOOP_BACKEND_CMD"),
                        reason="no flow runner configured; set EDA_LOOP_BACKEND_CMD")
    def test_real_flow_critical_path_in_sanity_band(self, toy_design, tmp_path):
        backend = SubprocessBackend(BackendConfig(
            mode="real", backend_cmd=os.environ["EDA_LOOP_BACKEND_CMD"]))
        netlist, _ = backend.synthesize(toy_design,
                                        FixedStrategy(StrategyKind.DELAY, 0),
                                        tmp_path / "w")
        metrics = backend.run_backend(netlist, toy_design, tmp_path / "w")
        assert 0 < metrics.critical_path_ns < toy_design.clock_period_ns * 2


class TestDesignLoading:
    def test_bare_verilog(self, toy_design):
        assert toy_design.name == "toy"
        assert toy_design.top_module == "toy"
        assert toy_design.clock_period_ns == DEFAULT_CLOCK_PERIOD_NS

    def test_json_description(self, and2_design):
        assert and2_design.name == "and2"
        assert and2_design.testbench is not None
        assert Path(and2_design.testbench).exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ToolEnvironmentError):
            from eda_loop.backend import load_design
            load_design(tmp_path / "ghost.v")

    def test_invariants(self):
        with pytest.raises(PreconditionError):
            Design(name="bad name!", rtl_sources=("a.v",), top_module="t")
        with pytest.raises(PreconditionError):
            Design(name="ok", rtl_sources=(), top_module="t")
        with pytest.raises(PreconditionError):
            Design(name="ok", rtl_sources=("a.v",), top_module="t",
                   clock_period_ns=0.0)

    def test_make_backend_modes(self):
        assert isinstance(make_backend(BackendConfig(mode="mock")), MockBackend)
        assert isinstance(make_backend(BackendConfig(mode="real")), SubprocessBackend)
        with pytest.raises(ToolEnvironmentError):
            make_backend(BackendConfig(mode="quantum"))
