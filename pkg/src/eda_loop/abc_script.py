"""Parsing, canonicalization, and feature extraction for ABC command sequences.

Grammar: commands are separated by ``;``.  Inside a command, whitespace and
commas both separate tokens (the comma form appears when a sequence is passed
inline to a synthesis tool with a leading ``+``).  A leading ``+`` on a
command is tolerated and dropped.  ``${name}`` placeholders are kept verbatim
until substitution.  Unknown command names are accepted; validating them is
the executor's job, not the parser's.
"""

from __future__ import annotations

import hashlib
import re
import statistics
from dataclasses import dataclass

from .errors import FeatureError, ScriptParseError, UnresolvedPlaceholderError

PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_SEPARATORS = " \t\r\n,"


@dataclass(frozen=True)
class AbcCommand:
    name: str
    args: tuple[str, ...] = ()

    @property
    def placeholders(self) -> frozenset[str]:
        found = set()
        for token in (self.name, *self.args):
            found.update(PLACEHOLDER_RE.findall(token))
        return frozenset(found)


@dataclass(frozen=True)
class AbcScript:
    commands: tuple[AbcCommand, ...] = ()

    @property
    def placeholders(self) -> frozenset[str]:
        out: set[str] = set()
        for cmd in self.commands:
            out.update(cmd.placeholders)
        return frozenset(out)

    def __bool__(self) -> bool:
        return bool(self.commands)


@dataclass(frozen=True)
class ScriptFeatures:
    """Summary of the knobs the optimizer manipulates.

    ``mean_balance`` averages the last ``-B`` value of each ``map`` command
    and defaults to 1.0 when no map carries one; at most one ``-B`` per map
    is counted, so the count never exceeds ``n_map``.
    """

    mean_balance: float = 1.0
    n_buffer: int = 0
    has_dch: bool = False
    n_map: int = 0


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _check_placeholders(text: str) -> None:
    pos = 0
    while True:
        start = text.find("${", pos)
        if start < 0:
            return
        m = PLACEHOLDER_RE.match(text, start)
        if m is None:
            end = text.find("}", start)
            reason = "unterminated placeholder" if end < 0 else "invalid placeholder name"
            raise ScriptParseError(reason, offset=_byte_offset(text, start))
        pos = m.end()


def parse_script(text: str) -> AbcScript:
    """Parse command-sequence text into an ``AbcScript``.

    Empty input (and empty segments from doubled or trailing ``;``) yield
    no commands.  Control characters other than tab/newline and an
    unterminated ``${`` are rejected with the byte offset of the problem.
    """
    for i, ch in enumerate(text):
        if ord(ch) < 0x20 and ch not in "\t\r\n" or ch == "\x7f":
            raise ScriptParseError(f"control character {ch!r}",
                                   offset=_byte_offset(text, i))
    _check_placeholders(text)

    commands = []
    for raw in text.split(";"):
        segment = raw.strip(_SEPARATORS)
        if not segment:
            continue
        if segment.startswith("+"):
            segment = segment[1:].strip(_SEPARATORS)
            if not segment:
                raise ScriptParseError("empty command after '+' prefix",
                                       offset=_byte_offset(text, text.find(raw)))
        tokens = [t for t in re.split(f"[{_SEPARATORS}]+", segment) if t]
        commands.append(AbcCommand(name=tokens[0], args=tuple(tokens[1:])))
    return AbcScript(commands=tuple(commands))


def serialize(script: AbcScript) -> str:
    """Canonical text form: ``;``-joined commands, single-space tokens."""
    return ";".join(" ".join((cmd.name, *cmd.args)) for cmd in script.commands)


def canonical_hash(script: AbcScript) -> str:
    """64-bit digest of the canonical serialization, as 16 hex chars.

    Whitespace variants and ``+`` prefixes already collapse during parsing,
    so equal scripts hash equal; command order still matters.
    """
    data = serialize(script).encode("utf-8")
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def extract_features(script: AbcScript) -> ScriptFeatures:
    """Compute the feature summary driving the mock model and the advisor."""
    balances = []
    n_buffer = 0
    has_dch = False
    n_map = 0
    for index, cmd in enumerate(script.commands):
        if cmd.name == "buffer":
            n_buffer += 1
        elif cmd.name == "dch":
            has_dch = True
        elif cmd.name == "map":
            n_map += 1
            value = None
            args = list(cmd.args)
            for i, arg in enumerate(args):
                if arg == "-B":
                    if i + 1 >= len(args):
                        raise FeatureError(f"command {index}: '-B' has no value")
                    value = args[i + 1]
            if value is not None:
                try:
                    balances.append(float(value))
                except ValueError:
                    raise FeatureError(
                        f"command {index}: non-numeric '-B' value {value!r}") from None
    mean_balance = statistics.fmean(balances) if balances else 1.0
    return ScriptFeatures(mean_balance=mean_balance, n_buffer=n_buffer,
                          has_dch=has_dch, n_map=n_map)


def substitute(script: AbcScript, env: dict[str, str]) -> AbcScript:
    """Replace every ``${name}`` with ``env[name]``; all must be bound."""
    missing = [name for name in script.placeholders if name not in env]
    if missing:
        raise UnresolvedPlaceholderError(missing)

    def repl(token: str) -> str:
        return PLACEHOLDER_RE.sub(lambda m: env[m.group(1)], token)

    commands = tuple(
        AbcCommand(name=repl(cmd.name), args=tuple(repl(a) for a in cmd.args))
        for cmd in script.commands)
    return AbcScript(commands=commands)


def script_from_features(mean_balance: float, n_buffer: int, has_dch: bool,
                         n_map: int) -> AbcScript:
    """Build the canonical script realizing a feature tuple.

    Used by grid enumeration and tests: ``strash`` then optional ``dch``,
    ``n_map`` mapping passes all at ``mean_balance``, then buffers.
    """
    commands = [AbcCommand("strash")]
    if has_dch:
        commands.append(AbcCommand("dch"))
    commands.extend(AbcCommand("map", ("-B", f"{mean_balance:.2f}"))
                    for _ in range(n_map))
    commands.extend(AbcCommand("buffer", ("-c", "-N", "4"))
                    for _ in range(n_buffer))
    return AbcScript(commands=tuple(commands))


def load_script(path) -> AbcScript:
    """Read one script from a ``.abc`` UTF-8 file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_script(fh.read())


def save_script(script: AbcScript, path) -> None:
    """Write one serialized script per file, with a trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(script) + "\n")
