"""Three-layer query routing: programmatic rules, model classification, keyword fallback.

Routing never hard-fails: if the rule layer abstains and the model layer is
unavailable or unparseable, the keyword table decides, defaulting to
targeted-extraction (the broadest safe memory path).
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass

from .errors import BackendRefused, ClassificationUnavailable, NetworkError
from .gateway import ChatRequest, LlmGateway
from .textutil import read_asset


class ActionTag(str, enum.Enum):
    PROFILE_INJECTION = "profile-injection"
    TARGETED_EXTRACTION = "targeted-extraction"
    TEMPORAL_REASONING = "temporal-reasoning"
    CONFLICT_RESOLUTION = "conflict-resolution"
    BROAD_SUMMARIZATION = "broad-summarization"
    CONSTRAINT_VALIDATION = "constraint-validation"
    STATE_TRACKING = "state-tracking"


TIER3_TAGS = frozenset({
    ActionTag.TEMPORAL_REASONING,
    ActionTag.CONFLICT_RESOLUTION,
    ActionTag.BROAD_SUMMARIZATION,
    ActionTag.CONSTRAINT_VALIDATION,
    ActionTag.STATE_TRACKING,
})

ALL_TAGS = tuple(ActionTag)


def flags_for_tag(tag: ActionTag) -> tuple[bool, bool]:
    """(requires_rag, requires_reasoning) derived from the tag alone."""
    if tag is ActionTag.PROFILE_INJECTION:
        return False, False
    if tag is ActionTag.TARGETED_EXTRACTION:
        return True, False
    return True, True


@dataclass(frozen=True)
class RouterDecision:
    requires_rag: bool
    requires_reasoning: bool
    action_tag: ActionTag
    decided_by: str  # rule | slm | heuristic


def decision_for_tag(tag: ActionTag, decided_by: str) -> RouterDecision:
    rag, reasoning = flags_for_tag(tag)
    return RouterDecision(requires_rag=rag, requires_reasoning=reasoning,
                          action_tag=tag, decided_by=decided_by)


# Rule families fire on unambiguous lexical patterns. A family matches when
# any of its patterns does; the layer answers only when exactly one family
# matches, otherwise the query falls through to the model layer.
_RULE_FAMILIES: tuple[tuple[ActionTag, tuple[re.Pattern, ...]], ...] = (
    (ActionTag.TEMPORAL_REASONING, (
        re.compile(r"\bhow\s+(?:many|much)\s+(?:days|weeks|months|years)\b.*\bbetween\b", re.I | re.S),
    )),
    (ActionTag.TARGETED_EXTRACTION, (
        re.compile(r"\bhow\s+long\s+(?:was|were|did|am|is|are|have|has|had)\b", re.I),
    )),
    (ActionTag.CONFLICT_RESOLUTION, (
        re.compile(r"\b(?:current|latest|most\s+recent)\b", re.I),
    )),
    (ActionTag.BROAD_SUMMARIZATION, (
        re.compile(r"\bhow\s+many\s+(?!days\b|weeks\b|months\b|years\b)", re.I),
        re.compile(r"\blist\s+all\b", re.I),
    )),
    (ActionTag.CONSTRAINT_VALIDATION, (
        re.compile(r"\b(?:always|never|allowed|must|forbidden|supposed\s+to)\b", re.I),
        re.compile(r"\bwhat\s+should\s+i\s+do\s+when\b", re.I),
    )),
    (ActionTag.STATE_TRACKING, (
        re.compile(r"\bhow\s+(?:has|have|did)\b.*\b(?:changed|evolved)\b", re.I | re.S),
    )),
    (ActionTag.PROFILE_INJECTION, (
        re.compile(r"\b(?:any\s+tips|recommend(?:ation)?s?|suggest(?:ion)?s?|draft)\b", re.I),
    )),
)

# Keyword table for the final fallback layer, checked in order.
_FALLBACK_KEYWORDS: tuple[tuple[ActionTag, tuple[str, ...]], ...] = (
    (ActionTag.TEMPORAL_REASONING, ("first", "before", "after", "when")),
    (ActionTag.BROAD_SUMMARIZATION, ("how many", "list all", "count")),
    (ActionTag.CONSTRAINT_VALIDATION, ("rule", "policy", "allowed")),
    (ActionTag.STATE_TRACKING, ("changed", "evolved")),
    (ActionTag.PROFILE_INJECTION, ("recommend", "draft", "suggest")),
)

_TAG_NAME_RE = re.compile(
    "|".join(t.value.replace("-", "[-_]") for t in ActionTag), re.I)
_JSON_BLOCK_RE = re.compile(r"\{.*?\}", re.S)

ROUTER_MAX_NEW_TOKENS = 64


def apply_rules(query: str) -> ActionTag | None:
    """Rule layer: answer only when exactly one rule family matches."""
    matched: list[ActionTag] = []
    for tag, patterns in _RULE_FAMILIES:
        if any(p.search(query) for p in patterns):
            matched.append(tag)
    if len(matched) == 1:
        return matched[0]
    return None


def _rescue_tag(text: str) -> ActionTag | None:
    m = _TAG_NAME_RE.search(text)
    if m is None:
        return None
    return ActionTag(m.group(0).lower().replace("_", "-"))


def load_router_prompt(prompt_dir=None) -> str:
    if prompt_dir is not None:
        from pathlib import Path

        return (Path(prompt_dir) / "router_system.txt").read_text(encoding="utf-8")
    return read_asset("router_system.txt")


def classify_llm(query: str, gateway: LlmGateway,
                 system_prompt: str | None = None) -> RouterDecision | None:
    """Model layer: strict JSON parse with a regex rescue for free-form text.

    Returns None when neither parse succeeds; gateway failures surface as
    ClassificationUnavailable so the caller can degrade to the heuristic.
    """
    system = system_prompt or load_router_prompt()
    req = ChatRequest(system_prompt=system, user_message=query,
                      max_new_tokens=ROUTER_MAX_NEW_TOKENS, temperature=0.0)
    try:
        resp = gateway.complete(req)
    except (NetworkError, TimeoutError, BackendRefused) as exc:
        raise ClassificationUnavailable(str(exc)) from exc
    text = resp.text
    for block in _JSON_BLOCK_RE.findall(text):
        try:
            obj = json.loads(block)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        tag = _rescue_tag(str(obj.get("action_tag", "")))
        if tag is None:
            continue
        rag_default, reasoning_default = flags_for_tag(tag)
        rag = bool(obj.get("requires_rag", rag_default))
        reasoning = bool(obj.get("requires_reasoning", reasoning_default))
        # Coerce flags so the decision invariants hold regardless of model output.
        if tag is ActionTag.PROFILE_INJECTION:
            rag = False
        if tag in TIER3_TAGS:
            reasoning = True
        return RouterDecision(requires_rag=rag, requires_reasoning=reasoning,
                              action_tag=tag, decided_by="slm")
    tag = _rescue_tag(text)
    if tag is not None:
        return decision_for_tag(tag, "slm")
    return None


def keyword_fallback(query: str) -> ActionTag:
    """Final fallback: first keyword hit wins, default targeted-extraction."""
    lowered = query.lower()
    for tag, keywords in _FALLBACK_KEYWORDS:
        for kw in keywords:
            if re.search(r"\b" + re.escape(kw) + r"\b", lowered):
                return tag
    return ActionTag.TARGETED_EXTRACTION


def route(query: str, gateway: LlmGateway | None = None,
          system_prompt: str | None = None) -> RouterDecision:
    """Full cascade: rules, then one model call, then the keyword table."""
    tag = apply_rules(query)
    if tag is not None:
        return decision_for_tag(tag, "rule")
    if gateway is not None and gateway.backend is not None:
        try:
            decision = classify_llm(query, gateway, system_prompt)
        except ClassificationUnavailable:
            decision = None
        if decision is not None:
            return decision
    return decision_for_tag(keyword_fallback(query), "heuristic")
