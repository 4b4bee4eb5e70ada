"""Candidate-script proposers: a deterministic rule table and a remote model.

The heuristic walks a fixed, totally ordered rule list per objective and
fires the first rule that is applicable *and* actually changes the script,
so a proposal never equals the current best.  The remote proposer sends a
prompt to a chat-completions-shaped HTTP endpoint and falls back to the
heuristic when the reply cannot be parsed; transport failures after two
attempts are hard errors so the loop never stalls silently.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from enum import Enum

import requests

from .abc_script import (AbcCommand, AbcScript, canonical_hash, extract_features,
                         parse_script, serialize)
from .errors import AdvisorError, ConfigurationError, ExtractionError, ScriptParseError
from .metrics import Objective

B_FLOOR = 0.70
B_CEILING = 1.00
TIMING_STEP = 0.02
AREA_STEP = 0.05
MAX_BUFFERS = 4
MAX_MAPS = 3


@dataclass(frozen=True)
class RecordSummary:
    """Compact view of one iteration for prompting and rule rotation."""

    index: int
    area_um2: float
    critical_path_ns: float
    total_power_uw: float
    accepted: bool


@dataclass(frozen=True)
class AdvisorRequest:
    objective: Objective
    best_script: AbcScript
    recent_records: tuple[RecordSummary, ...] = ()
    snippets: tuple[tuple[str, str], ...] = ()  # (source label, text)
    constraints: str = ""
    iteration_index: int = 0


class ProvenanceKind(Enum):
    HEURISTIC = "heuristic"
    REMOTE = "remote"


@dataclass(frozen=True)
class Provenance:
    kind: ProvenanceKind
    detail: str  # rule id or model id

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.detail}"


@dataclass(frozen=True)
class AdvisorProposal:
    script: AbcScript
    provenance: Provenance
    raw_response: str | None = None


# --- heuristic rule table -----------------------------------------------------

def _fmt_b(value: float) -> str:
    return f"{value:.2f}"


def _adjust_map_balances(script: AbcScript, delta: float, floor: float,
                         ceiling: float) -> AbcScript | None:
    """Shift every map ``-B`` value by delta, clamped; None if nothing moved."""
    changed = False
    commands = []
    for cmd in script.commands:
        if cmd.name == "map" and "-B" in cmd.args:
            args = list(cmd.args)
            for i, a in enumerate(args):
                if a == "-B" and i + 1 < len(args):
                    old = float(args[i + 1])
                    new = min(ceiling, max(floor, round(old + delta, 10)))
                    if new != old:
                        changed = True
                    args[i + 1] = _fmt_b(new)
            commands.append(AbcCommand("map", tuple(args)))
        else:
            commands.append(cmd)
    if not changed:
        return None
    return AbcScript(tuple(commands))


def _set_map_balances(script: AbcScript, value: float) -> AbcScript | None:
    out = []
    touched = False
    for cmd in script.commands:
        if cmd.name == "map" and "-B" in cmd.args:
            args = list(cmd.args)
            for i, a in enumerate(args):
                if a == "-B" and i + 1 < len(args):
                    args[i + 1] = _fmt_b(value)
                    touched = True
            out.append(AbcCommand("map", tuple(args)))
        else:
            out.append(cmd)
    if not touched:
        return None
    return AbcScript(tuple(out))


def _append(script: AbcScript, cmd: AbcCommand) -> AbcScript:
    return AbcScript(script.commands + (cmd,))


def _remove_last(script: AbcScript, name: str) -> AbcScript | None:
    for i in range(len(script.commands) - 1, -1, -1):
        if script.commands[i].name == name:
            return AbcScript(script.commands[:i] + script.commands[i + 1:])
    return None


def _remove_all(script: AbcScript, name: str) -> AbcScript | None:
    kept = tuple(c for c in script.commands if c.name != name)
    if len(kept) == len(script.commands):
        return None
    return AbcScript(kept)


def _insert_dch(script: AbcScript) -> AbcScript:
    # After the first strash; at the front when there is none.
    for i, cmd in enumerate(script.commands):
        if cmd.name == "strash":
            return AbcScript(script.commands[:i + 1] + (AbcCommand("dch"),)
                             + script.commands[i + 1:])
    return AbcScript((AbcCommand("dch"),) + script.commands)


def _set_map_count(script: AbcScript, count: int) -> AbcScript:
    """Truncate or repeat map commands so exactly ``count`` remain."""
    maps = [c for c in script.commands if c.name == "map"]
    template = maps[-1] if maps else AbcCommand("map", ("-B", "1.0"))
    kept = 0
    out = []
    for cmd in script.commands:
        if cmd.name == "map":
            if kept < count:
                out.append(cmd)
                kept += 1
        else:
            out.append(cmd)
    while kept < count:
        out.append(template)
        kept += 1
    return AbcScript(tuple(out))


def _timing_rules(script: AbcScript, features, idx: int):
    yield "T1", (lambda: _adjust_map_balances(script, -TIMING_STEP, B_FLOOR, B_CEILING)
                 if features.mean_balance > B_FLOOR else None)
    yield "T2", (lambda: _append(script, AbcCommand("buffer", ("-c", "-N", "4")))
                 if features.n_buffer < MAX_BUFFERS else None)
    yield "T3", (lambda: _insert_dch(script) if not features.has_dch else None)

    def rotate():
        for offset in range(4):
            value = B_FLOOR + (((idx + offset) % 4) * TIMING_STEP)
            candidate = _set_map_balances(script, value)
            if candidate is not None and candidate != script:
                return candidate
        return None
    yield "T4", rotate
    yield "TF", lambda: _append(script, AbcCommand("map", ("-B", _fmt_b(B_FLOOR))))


def _area_rules(script: AbcScript, features, idx: int):
    yield "A1", (lambda: _remove_last(script, "buffer") if features.n_buffer > 0 else None)
    yield "A2", (lambda: _remove_all(script, "dch") if features.has_dch else None)
    yield "A3", (lambda: _adjust_map_balances(script, AREA_STEP, B_FLOOR, B_CEILING)
                 if features.mean_balance < B_CEILING else None)
    yield "A4", (lambda: _append(script, AbcCommand("map", ("-B", "1.0")))
                 if features.n_map < MAX_MAPS else None)

    def rotate():
        for offset in range(3):
            count = 1 + ((idx + offset) % 3)
            candidate = _set_map_count(script, count)
            if candidate != script:
                return candidate
        return None
    yield "A5", rotate
    yield "AF", lambda: _append(script, AbcCommand("map", ("-B", "1.0")))


def heuristic_propose(req: AdvisorRequest) -> AdvisorProposal:
    """First applicable-and-effective rule wins, by objective.

    BALANCED alternates between the TIMING and AREA rule sets on iteration
    parity (even index: TIMING).  The result never hashes equal to the
    request's best script.
    """
    script = req.best_script
    features = extract_features(script)
    idx = req.iteration_index
    if req.objective is Objective.TIMING:
        rules = _timing_rules(script, features, idx)
    elif req.objective is Objective.AREA:
        rules = _area_rules(script, features, idx)
    else:
        rules = (_timing_rules(script, features, idx) if idx % 2 == 0
                 else _area_rules(script, features, idx))
    best_hash = canonical_hash(script)
    for rule_id, apply in rules:
        candidate = apply()
        if candidate is None or canonical_hash(candidate) == best_hash:
            continue
        return AdvisorProposal(script=candidate,
                               provenance=Provenance(ProvenanceKind.HEURISTIC, rule_id))
    raise AdvisorError("no heuristic rule produced a distinct script")


# --- prompting and extraction -------------------------------------------------

_IMPROVED_TAGS = {
    Objective.TIMING: ("critical_path_ns", "[TIMING IMPROVED: {:.3f}ns]"),
    Objective.BALANCED: ("critical_path_ns", "[TIMING IMPROVED: {:.3f}ns]"),
    Objective.AREA: ("area_um2", "[AREA IMPROVED: {:.2f} µm²]"),
}

FORMAT_INSTRUCTION = ("Reply with exactly one improved ABC command sequence, "
                      "`;`-separated, inside a fenced code block.")


def build_prompt(req: AdvisorRequest) -> str:
    """Deterministic prompt: goal, metric history, best script, snippets,
    output-format instruction.  Byte-stable for equal requests."""
    lines = [
        "Optimization goal: using the synthesis documentation and the measured "
        f"post-layout results below, focus on {req.objective.name} optimization.",
    ]
    if req.constraints:
        lines += ["", f"Constraints: {req.constraints}"]
    if req.recent_records:
        lines += ["", "Recent iterations:"]
        attr, tag_fmt = _IMPROVED_TAGS[req.objective]
        prev = None
        for rec in req.recent_records:
            line = (f"Iteration {rec.index}: {rec.area_um2:.2f} µm² area, "
                    f"{rec.critical_path_ns:.2f}ns critical path, "
                    f"{rec.total_power_uw:.6g} µW power")
            if rec.accepted and prev is not None:
                gain = getattr(prev, attr) - getattr(rec, attr)
                if gain > 0:
                    line += " " + tag_fmt.format(gain)
            lines.append(line)
            prev = rec
    lines += ["", "Current best command sequence:", serialize(req.best_script)]
    if req.snippets:
        lines += ["", "Documentation snippets:"]
        lines += [f"[{label}] {text}" for label, text in req.snippets]
    lines += ["", FORMAT_INSTRUCTION]
    return "\n".join(lines) + "\n"


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_INLINE_FIRST_COMMANDS = ("read_constr", "strash")


def extract_script(response: str) -> AbcScript:
    """Pull a command sequence out of a model reply.

    The first fenced code block wins; otherwise the first line with at
    least two ``;``-separated commands starting with read_constr or strash.
    """
    fence = _FENCE_RE.search(response)
    if fence:
        body = ";".join(chunk.strip() for chunk in fence.group(1).splitlines()
                        if chunk.strip())
        try:
            script = parse_script(body)
        except ScriptParseError as exc:
            raise ExtractionError(f"fenced block did not parse: {exc}",
                                  response=response) from None
        if not script:
            raise ExtractionError("fenced block contains no commands",
                                  response=response)
        return script
    for line in response.splitlines():
        segments = [s for s in line.split(";") if s.strip()]
        if len(segments) < 2:
            continue
        head = segments[0].strip().lstrip("+")
        name = re.split(r"[\s,]+", head.strip())[0] if head.strip() else ""
        if name in _INLINE_FIRST_COMMANDS:
            try:
                return parse_script(line)
            except ScriptParseError as exc:
                raise ExtractionError(f"inline candidate did not parse: {exc}",
                                      response=response) from None
    raise ExtractionError("no command sequence found in response", response=response)


# --- remote proposer ----------------------------------------------------------

DEFAULT_API_KEY_ENV = "EDA_LOOP_API_KEY"


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    model: str
    request_timeout_s: float = 60.0
    max_tokens: int = 1024
    api_key_env: str = DEFAULT_API_KEY_ENV


def _completions_url(base_url: str) -> str:
    url = base_url.rstrip("/")
    return url if url.endswith("/chat/completions") else url + "/chat/completions"


def _post_prompt(prompt: str, config: RemoteConfig, api_key: str) -> str:
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": config.max_tokens,
    }
    response = requests.post(
        _completions_url(config.base_url),
        json=payload,
        headers={"Authorization": f"Bearer {api_key}"},
        timeout=config.request_timeout_s,
    )
    response.raise_for_status()
    try:
        data = response.json()
    except ValueError:
        raise ExtractionError("reply body is not JSON", response=response.text) from None
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ExtractionError("reply is not chat-completions shaped",
                              response=str(data)) from None
    if not isinstance(content, str):
        raise ExtractionError("reply content is not text", response=str(data))
    return content


def remote_propose(req: AdvisorRequest, config: RemoteConfig) -> AdvisorProposal:
    """Query the remote endpoint; extraction failures retry once with a
    format reminder then fall back to the heuristic; transport failures
    after two attempts raise ``AdvisorError``."""
    if not config.base_url:
        raise ConfigurationError("remote advisor needs a base_url")
    api_key = os.environ.get(config.api_key_env, "")
    if not api_key:
        raise ConfigurationError(
            f"remote advisor credential missing: set ${config.api_key_env}")
    base_prompt = build_prompt(req)
    prompt = base_prompt
    transport_failures = 0
    extraction_failed = False
    for _ in range(2):
        try:
            reply = _post_prompt(prompt, config, api_key)
        except requests.RequestException as exc:
            transport_failures += 1
            if transport_failures >= 2:
                raise AdvisorError(f"remote endpoint failed twice: {exc}") from None
            continue
        except ExtractionError:
            extraction_failed = True
            prompt = base_prompt + "\nReminder: " + FORMAT_INSTRUCTION + "\n"
            continue
        try:
            script = extract_script(reply)
        except ExtractionError:
            extraction_failed = True
            prompt = base_prompt + "\nReminder: " + FORMAT_INSTRUCTION + "\n"
            continue
        return AdvisorProposal(script=script,
                               provenance=Provenance(ProvenanceKind.REMOTE, config.model),
                               raw_response=reply)
    if extraction_failed:
        fallback = heuristic_propose(req)
        return AdvisorProposal(script=fallback.script, provenance=fallback.provenance,
                               raw_response=None)
    raise AdvisorError("remote endpoint failed twice")


# --- advisor objects the optimizer drives -------------------------------------

class HeuristicAdvisor:
    name = "heuristic"

    def propose(self, req: AdvisorRequest) -> AdvisorProposal:
        return heuristic_propose(req)


class RemoteAdvisor:
    name = "remote"

    def __init__(self, config: RemoteConfig):
        self.config = config

    def propose(self, req: AdvisorRequest) -> AdvisorProposal:
        return remote_propose(req, self.config)
