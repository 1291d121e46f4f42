"""Three-stage grounding cascade and the per-tag escalation policy.

Stages run cheapest first: deterministic hard-failure detection, then the
short-answer passthrough, and only then a minimal yes/no model judge whose
unparseable output falls back to a token-overlap heuristic. Model inference
happens only when the deterministic stages cannot decide.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from types import MappingProxyType

from .errors import BackendRefused, NetworkError
from .gateway import ChatRequest, LlmGateway
from .router import ActionTag
from .textutil import content_tokens, read_asset, tokenize

TAU_GROUND = 0.07
PASSTHROUGH_MAX_WORDS = 6
JUDGE_MAX_NEW_TOKENS = 8
CONTEXT_SNIPPET_CHARS = 6000

_ESCALATE_RE = re.compile(r"escalate[\s_\-]*required", re.IGNORECASE)
_NOT_FOUND_PATTERNS = ("not found", "no information", "cannot find",
                       "couldn't find", "i don't know")
_NUMERIC_RE = re.compile(r"^[+-]?\d[\d,]*(?:\.\d+)?$")
_BOOLEAN_ANSWERS = frozenset({"yes", "no"})

JUDGE_USER_TEMPLATE = (
    "Question: {question}\n\n"
    "Retrieved context:\n{ctx_snippet}\n\n"
    "Candidate answer: {answer}\n\n"
    "Is the candidate answer supported by the retrieved context? Reply yes or no."
)

ESCALATION_MAP = MappingProxyType({
    ActionTag.PROFILE_INJECTION: ActionTag.TARGETED_EXTRACTION,
    ActionTag.TARGETED_EXTRACTION: ActionTag.CONFLICT_RESOLUTION,
    ActionTag.TEMPORAL_REASONING: ActionTag.TARGETED_EXTRACTION,
    ActionTag.CONFLICT_RESOLUTION: ActionTag.TARGETED_EXTRACTION,
    ActionTag.BROAD_SUMMARIZATION: ActionTag.TARGETED_EXTRACTION,
    ActionTag.CONSTRAINT_VALIDATION: ActionTag.TARGETED_EXTRACTION,
    ActionTag.STATE_TRACKING: ActionTag.CONFLICT_RESOLUTION,
})
RETRY_CAP = 1


@dataclass(frozen=True)
class EscalationPolicy:
    mapping: MappingProxyType = field(default=ESCALATION_MAP)
    retry_cap: int = RETRY_CAP


@dataclass(frozen=True)
class Verdict:
    grounded: bool
    stage: str  # hard_failure | passthrough | llm_judge | overlap_fallback
    judge_raw: str | None = None
    judge_prompt_tokens: int = 0
    judge_completion_tokens: int = 0


def detect_hard_failure(answer: str) -> bool:
    """Empty answers, ESCALATE_REQUIRED variants, and not-found phrasings."""
    stripped = answer.strip()
    if not stripped:
        return True
    if _ESCALATE_RE.search(stripped):
        return True
    lowered = stripped.lower()
    return any(p in lowered for p in _NOT_FOUND_PATTERNS)


def is_short_passthrough(answer: str, max_words: int = PASSTHROUGH_MAX_WORDS) -> bool:
    """True for answers short enough to skip the grounding judge."""
    words = answer.split()
    if not words:
        return False
    if len(words) <= max_words:
        return True
    bare = [w.strip(".,!?;: ") for w in words]
    if all(_NUMERIC_RE.match(w) for w in bare if w):
        return True
    if _NUMERIC_RE.match(bare[0] or "") and len(words) <= 3:
        return True
    return len(words) == 1 and bare[0].lower() in _BOOLEAN_ANSWERS


def overlap_fallback(answer: str, context: str, tau: float = TAU_GROUND,
                     judge_raw: str | None = None) -> Verdict:
    """Grounded iff the share of answer content tokens found in the context
    reaches tau. Answers with no content tokens are never grounded."""
    answer_content = content_tokens(answer)
    if not answer_content:
        return Verdict(grounded=False, stage="overlap_fallback", judge_raw=judge_raw)
    context_tokens = set(tokenize(context))
    ratio = len(answer_content & context_tokens) / len(answer_content)
    return Verdict(grounded=ratio >= tau, stage="overlap_fallback", judge_raw=judge_raw)


def grounding_judge(gateway: LlmGateway, question: str, context: str, answer: str,
                    tau: float = TAU_GROUND) -> Verdict:
    """Minimal yes/no model check; anything unparseable falls back to overlap."""
    req = ChatRequest(
        system_prompt=read_asset("validator_system.txt").strip(),
        user_message=JUDGE_USER_TEMPLATE.format(
            question=question,
            ctx_snippet=context[:CONTEXT_SNIPPET_CHARS],
            answer=answer,
        ),
        max_new_tokens=JUDGE_MAX_NEW_TOKENS,
        temperature=0.0,
    )
    try:
        resp = gateway.complete(req)
    except (NetworkError, TimeoutError, BackendRefused):
        return overlap_fallback(answer, context, tau)
    verdict_text = resp.text.strip().lower()
    if verdict_text.startswith("yes"):
        return Verdict(True, "llm_judge", resp.text,
                       resp.prompt_tokens, resp.completion_tokens)
    if verdict_text.startswith("no"):
        return Verdict(False, "llm_judge", resp.text,
                       resp.prompt_tokens, resp.completion_tokens)
    fallback = overlap_fallback(answer, context, tau, judge_raw=resp.text)
    return Verdict(fallback.grounded, fallback.stage, resp.text,
                   resp.prompt_tokens, resp.completion_tokens)


def validate(answer: str, context: str, question: str,
             gateway: LlmGateway | None = None, tau: float = TAU_GROUND,
             passthrough_max_words: int = PASSTHROUGH_MAX_WORDS) -> Verdict:
    """The full cascade, in order; model inference only at stage three."""
    if detect_hard_failure(answer):
        return Verdict(grounded=False, stage="hard_failure")
    if is_short_passthrough(answer, passthrough_max_words):
        return Verdict(grounded=True, stage="passthrough")
    if gateway is None or gateway.backend is None:
        return overlap_fallback(answer, context, tau)
    return grounding_judge(gateway, question, context, answer, tau)


def escalation_target(tag: ActionTag) -> ActionTag:
    return ESCALATION_MAP[tag]
