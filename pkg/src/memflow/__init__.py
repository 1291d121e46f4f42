"""memflow: training-free memory orchestration for small chat models.

Routes each query to one of seven typed memory operations, executes the
matching retrieval and deterministic preprocessing tier, compiles evidence
under per-tag token budgets, answers through a pluggable chat gateway with
a bounded tool loop, and validates grounding with a one-retry escalation
policy.
"""
from .answer import AnswerDraft, PromptTemplate, generate, load_templates, render_prompt
from .gateway import (ChatRequest, ChatResponse, HttpChatBackend, LlmGateway,
                      ScriptedBackend, ScriptRule, TokenCounter)
from .packer import (PackBudget, PackedContext, TagBudget, apply_word_cap,
                     dedup_jaccard, pack, sentence_extract)
from .pipeline import (ABSTENTION, PipelineConfig, PipelineResult, StageTrace,
                       active_context_check, answer_query, trace_summary)
from .retrieval import (Anchor, HashingEmbedder, HybridIndex, RetrievalParams,
                        ScoredChunk, bm25_rank, build_index, dense_rank,
                        dual_anchor_retrieve, extract_anchors, hybrid_search,
                        multipass_retrieve, rrf_fuse)
from .router import (ActionTag, RouterDecision, apply_rules, classify_llm,
                     keyword_fallback, route)
from .store import (Chunk, ConversationHistory, MemoryStore, ProfileFact,
                    Session, Turn, UserProfile, build_store, chunk_history,
                    compile_profile, ingest_history, load_store, save_store)
from .tiers import (AnnotatedChunk, EvidenceBundle, SummaryEntry,
                    chronological_sort, constraint_filter, diverse_aggregate,
                    execute_tier1, execute_tier2, execute_tier3, recency_filter,
                    state_track_prepare)
from .tools import (ToolCall, ToolResult, count_occurrences, days_between,
                    execute_tool, months_between, parse_tool_call, weeks_between)
from .validator import (EscalationPolicy, Verdict, detect_hard_failure,
                        escalation_target, grounding_judge, is_short_passthrough,
                        overlap_fallback, validate)

__version__ = "0.1.0"
