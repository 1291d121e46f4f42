"""End-to-end read path: short-circuit, route, execute, pack, answer, validate, escalate.

The control flow is a bounded memory-control policy, not an agent loop.
Stage 1 answers directly from the active context when the query overlaps the
last eight turns strongly enough. Otherwise one routing decision fixes the
whole execution path: tier execution and packing are deterministic, the
answer stage makes one model call (plus bounded tool rounds), and a failed
grounding check earns exactly one re-routed retry before the literal
abstention is returned.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .answer import AnswerDraft, generate, load_templates, render_prompt
from .errors import EmptyProfile, IndexNotReady, StoreNotReady
from .gateway import ChatRequest, LlmGateway
from .packer import PackBudget, PackedContext, pack, plain_concat
from .retrieval import HybridIndex, RetrievalParams, hybrid_search
from .router import (ActionTag, RouterDecision, decision_for_tag,
                     load_router_prompt, route)
from .store import ConversationHistory, MemoryStore
from .textutil import content_tokens, tokenize
from .tiers import (EvidenceBundle, annotate, execute_tier1, execute_tier2,
                    execute_tier3)
from .validator import escalation_target, detect_hard_failure, validate

ABSTENTION = "I could not find reliable information."
ACTIVE_CONTEXT_THRESHOLD = 0.6
ACTIVE_CONTEXT_TURNS = 8
ACTIVE_SPAN_MAX_TURNS = 3
STAGES = ("router", "answer", "validator", "escalation_answer", "tools")

ABLATION_NAMES = ("uniform_rag", "no_router", "no_tools", "no_validator",
                  "no_packer", "no_retrieval_strategy")


@dataclass
class PipelineConfig:
    uniform_rag: bool = False
    no_router: bool = False
    no_tools: bool = False
    no_validator: bool = False
    no_packer: bool = False
    no_retrieval_strategy: bool = False
    budget: PackBudget = field(default_factory=PackBudget)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    store_flavor: str = "chat"  # chat | document | peer-conversation
    answer_max_new_tokens: int = 256
    tau_ground: float = 0.07
    passthrough_max_words: int = 6
    prompt_dir: str | None = None

    @classmethod
    def with_ablations(cls, names: str | list[str], **kwargs) -> "PipelineConfig":
        if isinstance(names, str):
            names = [n.strip() for n in names.split(",") if n.strip()]
        toggles = {}
        for name in names:
            if name not in ABLATION_NAMES:
                raise ValueError(f"unknown ablation {name!r}")
            toggles[name] = True
        return cls(**toggles, **kwargs)


@dataclass
class StageTrace:
    stage: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    invoked: bool = False

    def to_dict(self) -> dict:
        return {"stage": self.stage, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens, "invoked": self.invoked}


@dataclass
class PipelineResult:
    answer: str
    action_tag: str | None
    decided_by: str | None
    is_escalated: bool
    escalation_triggered: bool
    short_circuited: bool
    packed_tokens: int
    stage_traces: dict[str, StageTrace]
    slm_call_count: int

    def pipeline_tokens(self) -> int:
        return sum(t.prompt_tokens + t.completion_tokens
                   for t in self.stage_traces.values())

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "action_tag": self.action_tag,
            "decided_by": self.decided_by,
            "is_escalated": self.is_escalated,
            "escalation_triggered": self.escalation_triggered,
            "short_circuited": self.short_circuited,
            "packed_tokens": self.packed_tokens,
            "stage_traces": {k: v.to_dict() for k, v in self.stage_traces.items()},
            "slm_call_count": self.slm_call_count,
        }


class _RecordingGateway:
    """Per-query wrapper logging (prompt, completion) for every successful call."""

    def __init__(self, inner: LlmGateway):
        self._inner = inner
        self.backend = inner.backend
        self.counter = inner.counter
        self.calls: list[tuple[int, int]] = []

    def complete(self, req: ChatRequest):
        resp = self._inner.complete(req)
        self.calls.append((resp.prompt_tokens, resp.completion_tokens))
        return resp

    def count_tokens(self, text: str) -> int:
        return self._inner.count_tokens(text)


def active_context_check(query: str, history: ConversationHistory,
                         threshold: float = ACTIVE_CONTEXT_THRESHOLD) -> str | None:
    """Stage-1 short-circuit: answer from the last eight turns when the
    query's content tokens overlap them at or above the threshold. Returns
    the highest-overlap contiguous span of up to three turns."""
    query_tokens = content_tokens(query)
    if not query_tokens:
        return None
    turns = history.all_turns()[-ACTIVE_CONTEXT_TURNS:]
    if not turns:
        return None
    window_tokens = set(tokenize(" ".join(t.text for t in turns)))
    overlap = len(query_tokens & window_tokens) / len(query_tokens)
    if overlap < threshold:
        return None
    best_span = None
    best_key = (-1, -1, 0)
    for start in range(len(turns)):
        for width in range(1, ACTIVE_SPAN_MAX_TURNS + 1):
            span = turns[start:start + width]
            if len(span) < width:
                break
            span_tokens = set(tokenize(" ".join(t.text for t in span)))
            # Tie rule: higher overlap, then the more recent start, then
            # the tighter window.
            key = (len(query_tokens & span_tokens), start, -width)
            if key > best_key:
                best_key = key
                best_span = span
    return "\n".join(f"{t.role}: {t.text}" for t in best_span)


def _flat_bundle(index: HybridIndex, query: str, tag: ActionTag,
                 params: RetrievalParams) -> EvidenceBundle:
    scored = hybrid_search(index, query, params.base_top_k, params, label="flat")
    return EvidenceBundle(tag=tag, episodic=annotate(index, scored))


def _execute_stage3(query: str, store: MemoryStore, index: HybridIndex,
                    config: PipelineConfig, decision: RouterDecision) -> EvidenceBundle:
    tag = decision.action_tag
    if config.uniform_rag:
        # the whole tiered memory agent is replaced: generic evidence,
        # generic budget and prompt (the bundle tag drives both)
        return _flat_bundle(index, query, ActionTag.TARGETED_EXTRACTION,
                            config.retrieval)
    if config.no_retrieval_strategy:
        # flat retrieval and no preprocessing, but routing is retained so
        # per-tag prompts, budgets, and tool gating stay in effect
        return _flat_bundle(index, query, tag, config.retrieval)
    if tag is ActionTag.PROFILE_INJECTION:
        try:
            return execute_tier1(store.profile, query)
        except EmptyProfile:
            return EvidenceBundle(tag=tag)
    if tag is ActionTag.TARGETED_EXTRACTION:
        return execute_tier2(index, query, config.retrieval,
                             document_mode=config.store_flavor == "document")
    return execute_tier3(index, query, decision, config.retrieval)


def _pack_stage(bundle: EvidenceBundle, config: PipelineConfig, counter,
                query: str, index: HybridIndex) -> PackedContext:
    if config.no_packer:
        return plain_concat(bundle, config.budget.global_ceiling, counter)
    return pack(bundle, config.budget, counter, query=query, embedder=index.embedder)


def answer_query(query: str, store: MemoryStore, index: HybridIndex,
                 config: PipelineConfig, gateway: LlmGateway,
                 templates=None) -> PipelineResult:
    """Run the full read path for one query and return the answer plus trace."""
    if store is None:
        raise StoreNotReady("ingest a store before querying")
    traces = {name: StageTrace(name) for name in STAGES}

    span = active_context_check(query, store.history)
    if span is not None:
        return PipelineResult(
            answer=span, action_tag=None, decided_by=None, is_escalated=False,
            escalation_triggered=False, short_circuited=True, packed_tokens=0,
            stage_traces=traces, slm_call_count=0)

    if index is None:
        raise IndexNotReady("build an index before querying")

    recorder = _RecordingGateway(gateway)
    templates = templates or load_templates(config.prompt_dir)

    # Stage 2: routing.
    if config.no_router:
        decision = decision_for_tag(ActionTag.TARGETED_EXTRACTION, "heuristic")
    else:
        router_prompt = (load_router_prompt(config.prompt_dir)
                         if config.prompt_dir else None)
        before = len(recorder.calls)
        decision = route(query, recorder, router_prompt)
        if len(recorder.calls) > before:
            pt, ct = recorder.calls[-1]
            traces["router"] = StageTrace("router", pt, ct, invoked=True)

    def run_pass(tag_decision: RouterDecision, stage_name: str,
                 ) -> tuple[AnswerDraft, PackedContext]:
        bundle = _execute_stage3(query, store, index, config, tag_decision)
        packed = _pack_stage(bundle, config, recorder.counter, query, index)
        request = render_prompt(bundle.tag, packed, query, config.store_flavor,
                                templates, config.answer_max_new_tokens)
        draft = generate(recorder, request, packed, bundle.tag,
                         tools_enabled=not config.no_tools)
        if draft.call_log:
            pt, ct = draft.call_log[0]
            traces[stage_name] = StageTrace(stage_name, pt, ct, invoked=True)
            for pt, ct in draft.call_log[1:]:
                traces["tools"].prompt_tokens += pt
                traces["tools"].completion_tokens += ct
                traces["tools"].invoked = True
        return draft, packed

    def run_validation(draft: AnswerDraft, packed: PackedContext):
        before = len(recorder.calls)
        verdict = validate(draft.text, packed.text, query, recorder,
                           tau=config.tau_ground,
                           passthrough_max_words=config.passthrough_max_words)
        for pt, ct in recorder.calls[before:]:
            traces["validator"].prompt_tokens += pt
            traces["validator"].completion_tokens += ct
            traces["validator"].invoked = True
        return verdict

    draft, packed = run_pass(decision, "answer")

    is_escalated = False
    escalation_triggered = False
    final_answer = draft.text
    final_packed = packed

    if not config.no_validator:
        verdict = run_validation(draft, packed)
        if not verdict.grounded:
            escalation_triggered = True
            retry_decision = decision_for_tag(
                escalation_target(decision.action_tag), decision.decided_by)
            retry_draft, retry_packed = run_pass(retry_decision, "escalation_answer")
            retry_verdict = run_validation(retry_draft, retry_packed)
            if retry_verdict.grounded:
                final_answer = retry_draft.text
                final_packed = retry_packed
                is_escalated = True
            elif not detect_hard_failure(draft.text):
                final_answer = draft.text  # retry did not improve; keep original
            else:
                final_answer = ABSTENTION

    return PipelineResult(
        answer=final_answer,
        action_tag=decision.action_tag.value,
        decided_by=decision.decided_by,
        is_escalated=is_escalated,
        escalation_triggered=escalation_triggered,
        short_circuited=False,
        packed_tokens=final_packed.total_tokens,
        stage_traces=traces,
        slm_call_count=len(recorder.calls),
    )


def trace_summary(results: list[PipelineResult]) -> dict:
    """Aggregate stats over a batch of pipeline results."""
    if not results:
        return {"count": 0}
    packed = [r.packed_tokens for r in results]
    pipeline_totals = [r.pipeline_tokens() for r in results]
    invocation_rates = {
        stage: sum(1 for r in results if r.stage_traces[stage].invoked) / len(results)
        for stage in STAGES
    }
    triggered = sum(1 for r in results if r.escalation_triggered)
    adopted = sum(1 for r in results if r.is_escalated)
    return {
        "count": len(results),
        "mean_packed_tokens": statistics.mean(packed),
        "median_packed_tokens": statistics.median(packed),
        "mean_pipeline_tokens": statistics.mean(pipeline_totals),
        "invocation_rates": invocation_rates,
        "escalation_triggered_rate": triggered / len(results),
        "escalation_adopted_rate": adopted / len(results),
        "short_circuit_rate": sum(1 for r in results if r.short_circuited) / len(results),
    }
