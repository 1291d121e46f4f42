"""Tag-conditioned answer generation with the bounded tool loop.

Each tag ships its own system prompt; every prompt ends with the shared
grounding instruction containing the literal ESCALATE_REQUIRED escape
hatch. Tool mode exists only for temporal-reasoning and broad-summarization
and honors at most one TOOL line per response across at most three
continuation rounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .errors import BackendRefused, NetworkError
from .gateway import ChatRequest, LlmGateway
from .packer import PackedContext
from .router import ActionTag
from .textutil import read_asset
from .tools import execute_tool, parse_tool_call

MAX_TOOL_ROUNDS = 3
TOOL_TAGS = frozenset({ActionTag.TEMPORAL_REASONING, ActionTag.BROAD_SUMMARIZATION})

_TEMPLATE_FILES = {
    ActionTag.PROFILE_INJECTION: "answer_profile_injection.txt",
    ActionTag.TARGETED_EXTRACTION: "answer_targeted_extraction.txt",
    ActionTag.TEMPORAL_REASONING: "answer_temporal_reasoning.txt",
    ActionTag.CONFLICT_RESOLUTION: "answer_conflict_resolution.txt",
    ActionTag.BROAD_SUMMARIZATION: "answer_broad_summarization.txt",
    ActionTag.CONSTRAINT_VALIDATION: "answer_constraint_validation.txt",
    ActionTag.STATE_TRACKING: "answer_state_tracking.txt",
}


@dataclass(frozen=True)
class PromptTemplate:
    tag: ActionTag
    system_text: str
    tool_mode: bool


@lru_cache(maxsize=8)
def _load_templates(prompt_dir: str | None) -> dict[ActionTag, PromptTemplate]:
    def read(name: str) -> str:
        if prompt_dir is not None:
            return (Path(prompt_dir) / name).read_text(encoding="utf-8")
        return read_asset(name)

    grounding = read("grounding_instruction.txt").strip()
    templates: dict[ActionTag, PromptTemplate] = {}
    for tag, filename in _TEMPLATE_FILES.items():
        body = read(filename).strip()
        templates[tag] = PromptTemplate(
            tag=tag,
            system_text=body + "\n\n" + grounding,
            tool_mode=tag in TOOL_TAGS,
        )
    return templates


def load_templates(prompt_dir=None) -> dict[ActionTag, PromptTemplate]:
    """Load the seven tag templates, appending the shared grounding suffix.

    A prompt_dir override must provide every template file plus the
    grounding and peer-override assets.
    """
    return _load_templates(str(prompt_dir) if prompt_dir is not None else None)


def load_peer_override(prompt_dir=None) -> str:
    if prompt_dir is not None:
        return (Path(prompt_dir) / "peer_override.txt").read_text(encoding="utf-8").strip()
    return read_asset("peer_override.txt").strip()


def render_prompt(tag: ActionTag, packed: PackedContext, query: str,
                  store_flavor: str = "chat",
                  templates: dict[ActionTag, PromptTemplate] | None = None,
                  max_new_tokens: int = 256,
                  prompt_dir=None) -> ChatRequest:
    """Build the answer-stage request: tag system prompt, padded context + question."""
    templates = templates or load_templates(prompt_dir)
    system = templates[tag].system_text
    if store_flavor == "peer-conversation":
        system = load_peer_override(prompt_dir) + "\n\n" + system
    if packed.text:
        user = f"{packed.text}\n\nQuestion: {query}"
    else:
        user = f"Question: {query}"
    return ChatRequest(system_prompt=system, user_message=user,
                       max_new_tokens=max_new_tokens, temperature=0.0)


@dataclass
class AnswerDraft:
    text: str
    tool_rounds_used: int = 0
    tool_calls: list = field(default_factory=list)
    prompt_tokens: int = 0
    completion_tokens: int = 0
    # (prompt, completion) per model call; entry 0 is the answer call, the
    # rest are tool-continuation rounds. Feeds per-stage trace accounting.
    call_log: list[tuple[int, int]] = field(default_factory=list)


def _strip_tool_lines(text: str) -> str:
    lines = [ln for ln in text.splitlines() if not ln.strip().startswith("TOOL:")]
    return "\n".join(lines).strip()


def generate(gateway: LlmGateway, request: ChatRequest, packed: PackedContext,
             tag: ActionTag, tools_enabled: bool = True) -> AnswerDraft:
    """One answer call plus up to three deterministic tool rounds.

    Tool execution runs against the packed context text, never the raw
    history; only the first TOOL line of a response is honored. Gateway
    failures degrade to an ESCALATE_REQUIRED draft so the validator treats
    them as hard failures.
    """
    try:
        resp = gateway.complete(request)
    except (NetworkError, TimeoutError, BackendRefused):
        return AnswerDraft(text="ESCALATE_REQUIRED")
    call_log = [(resp.prompt_tokens, resp.completion_tokens)]
    text = resp.text
    tool_calls = []
    rounds = 0
    if tools_enabled and tag in TOOL_TAGS:
        user = request.user_message
        while rounds < MAX_TOOL_ROUNDS:
            call = parse_tool_call(text)
            if call is None:
                break
            result = execute_tool(call, packed.text)
            tool_calls.append(call)
            user = f"{user}\n\n{call.rendered()}\n{result.rendered}"
            follow_up = ChatRequest(system_prompt=request.system_prompt,
                                    user_message=user,
                                    max_new_tokens=request.max_new_tokens,
                                    temperature=request.temperature)
            rounds += 1
            try:
                resp = gateway.complete(follow_up)
            except (NetworkError, TimeoutError, BackendRefused):
                text = "ESCALATE_REQUIRED"
                break
            call_log.append((resp.prompt_tokens, resp.completion_tokens))
            text = resp.text
    if not tools_enabled:
        text = _strip_tool_lines(text)
    return AnswerDraft(
        text=text,
        tool_rounds_used=rounds,
        tool_calls=tool_calls,
        prompt_tokens=sum(p for p, _ in call_log),
        completion_tokens=sum(c for _, c in call_log),
        call_log=call_log,
    )
