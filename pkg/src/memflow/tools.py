"""Closed tool registry for the bounded TOOL line protocol.

Exactly four tools exist: three date-difference calculators and a keyword
counter. The parser never yields a name outside the registry, so the model
cannot select arbitrary tools. Wire format, bit-exact:

    TOOL: days_between | 2023-03-01 | 2023-03-22
    TOOL_RESULT: 21
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date

from .errors import BadDate

TOOL_RESULT_PREFIX = "TOOL_RESULT: "
BAD_DATE_VALUE = "ERROR bad date"

TOOL_ARITY = {
    "days_between": 2,
    "weeks_between": 2,
    "months_between": 2,
    "count_occurrences": 1,
}

_TOOL_LINE_RE = re.compile(r"^\s*TOOL:\s*([A-Za-z_][A-Za-z0-9_]*)\s*\|(.+)$")


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: tuple[str, ...]

    def rendered(self) -> str:
        return f"TOOL: {self.name} | " + " | ".join(self.args)


@dataclass(frozen=True)
class ToolResult:
    call: ToolCall
    value: str

    @property
    def rendered(self) -> str:
        return TOOL_RESULT_PREFIX + self.value


def parse_tool_call(model_output: str) -> ToolCall | None:
    """Parse the first TOOL-shaped line; unknown names or bad arity yield None."""
    for line in model_output.splitlines():
        m = _TOOL_LINE_RE.match(line)
        if m is None:
            continue
        name = m.group(1)
        args = tuple(a.strip() for a in m.group(2).split("|"))
        if name not in TOOL_ARITY:
            return None
        if len(args) != TOOL_ARITY[name] or any(not a for a in args):
            return None
        return ToolCall(name=name, args=args)
    return None


def _parse_iso(text: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError as exc:
        raise BadDate(f"unparseable date {text!r}") from exc


def days_between(d1: str, d2: str) -> str:
    a, b = _parse_iso(d1), _parse_iso(d2)
    return str(abs((b - a).days))


def weeks_between(d1: str, d2: str) -> str:
    a, b = _parse_iso(d1), _parse_iso(d2)
    return str(abs((b - a).days) // 7)


def months_between(d1: str, d2: str) -> str:
    """Complete calendar months between two dates (anchor-day comparison)."""
    a, b = sorted((_parse_iso(d1), _parse_iso(d2)))
    months = (b.year - a.year) * 12 + (b.month - a.month)
    if b.day < a.day:
        months -= 1
    return str(max(months, 0))


def count_occurrences(keyword: str, context: str) -> str:
    """Case-insensitive word-boundary match count over the given text."""
    if not keyword:
        return "0"
    return str(len(re.findall(r"\b" + re.escape(keyword) + r"\b", context, re.IGNORECASE)))


def execute_tool(call: ToolCall, context_text: str) -> ToolResult:
    """Run a registered tool; date parse failures come back as a recoverable
    error value rather than raising to the model loop."""
    if call.name == "count_occurrences":
        return ToolResult(call, count_occurrences(call.args[0], context_text))
    fn = {"days_between": days_between, "weeks_between": weeks_between,
          "months_between": months_between}[call.name]
    try:
        value = fn(call.args[0], call.args[1])
    except BadDate:
        value = BAD_DATE_VALUE
    return ToolResult(call, value)
