"""Configuration file loading and the resolved runtime configuration.

Resolution order for every knob: command-line flag, then config file, then
built-in default.  The config file is TOML with four optional tables:

    [backend]  mode, yosys_cmd, iverilog_cmd, vvp_cmd, backend_cmd,
               container_image, synth_timeout_s, backend_timeout_s,
               sim_timeout_s, mock_a0, mock_d0
    [advisor]  mode, base_url, model, request_timeout_s, max_tokens,
               api_key_env
    [loop]     max_iterations, patience, target, duplicate_retries
    [paths]    runs_dir, corpus_dir
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .advisor import DEFAULT_API_KEY_ENV, RemoteConfig
from .backend import BackendConfig
from .errors import ConfigurationError
from .optimizer import LoopConfig

ADVISOR_MODES = ("heuristic", "remote", "no-feedback")


def default_corpus_dir() -> Path | None:
    """The in-repo snippet corpus, when running from a checkout."""
    candidate = Path(__file__).resolve().parent.parent.parent / "docs" / "corpus"
    return candidate if candidate.is_dir() else None


@dataclass
class CliConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    advisor_mode: str = "heuristic"
    remote: RemoteConfig = field(default_factory=lambda: RemoteConfig(base_url="", model=""))
    loop: LoopConfig = field(default_factory=LoopConfig)
    runs_dir: Path = Path("runs")
    corpus_dir: Path | None = field(default_factory=default_corpus_dir)
    constraints: str = ""

    def __post_init__(self):
        if self.advisor_mode not in ADVISOR_MODES:
            raise ConfigurationError(
                f"advisor mode {self.advisor_mode!r} not in {ADVISOR_MODES}")
        # no-feedback means exactly one proposal is executed, blind.
        if self.advisor_mode == "no-feedback":
            self.loop = dataclasses.replace(self.loop, max_iterations=1)


def _take(table: dict, key: str, default):
    value = table.get(key, default)
    if default is not None and value is not None and not isinstance(value, type(default)) \
            and not (isinstance(default, float) and isinstance(value, int)):
        raise ConfigurationError(f"config key {key!r} has wrong type: {value!r}")
    return value


def load_config(path: str | Path | None) -> CliConfig:
    """Parse a TOML config file into a ``CliConfig``; None gives defaults."""
    if path is None:
        return CliConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid TOML: {exc}") from None

    backend_tbl = doc.get("backend", {})
    backend = BackendConfig(
        mode=_take(backend_tbl, "mode", "mock"),
        yosys_cmd=_take(backend_tbl, "yosys_cmd", "yosys"),
        iverilog_cmd=_take(backend_tbl, "iverilog_cmd", "iverilog"),
        vvp_cmd=_take(backend_tbl, "vvp_cmd", "vvp"),
        backend_cmd=_take(backend_tbl, "backend_cmd", ""),
        container_image=_take(backend_tbl, "container_image", ""),
        synth_timeout_s=float(_take(backend_tbl, "synth_timeout_s", 300.0)),
        backend_timeout_s=float(_take(backend_tbl, "backend_timeout_s", 3600.0)),
        sim_timeout_s=float(_take(backend_tbl, "sim_timeout_s", 120.0)),
        mock_a0=backend_tbl.get("mock_a0"),
        mock_d0=backend_tbl.get("mock_d0"),
    )
    advisor_tbl = doc.get("advisor", {})
    remote = RemoteConfig(
        base_url=_take(advisor_tbl, "base_url", ""),
        model=_take(advisor_tbl, "model", ""),
        request_timeout_s=float(_take(advisor_tbl, "request_timeout_s", 60.0)),
        max_tokens=int(_take(advisor_tbl, "max_tokens", 1024)),
        api_key_env=_take(advisor_tbl, "api_key_env", DEFAULT_API_KEY_ENV),
    )
    loop_tbl = doc.get("loop", {})
    loop = LoopConfig(
        max_iterations=int(_take(loop_tbl, "max_iterations", 10)),
        patience=int(_take(loop_tbl, "patience", 3)),
        target=loop_tbl.get("target"),
        duplicate_retries=int(_take(loop_tbl, "duplicate_retries", 3)),
    )
    paths_tbl = doc.get("paths", {})
    corpus = paths_tbl.get("corpus_dir")
    return CliConfig(
        backend=backend,
        advisor_mode=_take(advisor_tbl, "mode", "heuristic"),
        remote=remote,
        loop=loop,
        runs_dir=Path(_take(paths_tbl, "runs_dir", "runs")),
        corpus_dir=Path(corpus) if corpus else default_corpus_dir(),
        constraints=_take(doc.get("goal", {}), "constraints", ""),
    )
