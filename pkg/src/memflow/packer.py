"""Priority-slot context compilation under per-tag token budgets.

Allocation order is pinned, then summaries, then episodic. Pinned content is
never truncated (a pinned section alone over the ceiling raises
PinnedOverflow). Summaries shed their lowest-relevance entries on overflow;
episodic chunks are truncated last, lowest fused score first, and any budget
the higher slots leave unused flows to the episodic slot.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import PinnedOverflow
from .router import ActionTag
from .textutil import split_sentences, tokenize
from .tiers import AnnotatedChunk, EvidenceBundle, _sentence_relevance

GLOBAL_CEILING = 20480
JACCARD_THRESHOLD = 0.85
PINNED_HEADER = "== USER PROFILE =="
SUMMARY_HEADER = "== AGGREGATED FACTS =="
EPISODIC_HEADER = "== CONVERSATION EVIDENCE =="
ELLIPSIS_MARKER = "..."

# Precision-sensitive tags keep only the two most query-relevant sentences
# per chunk before word caps apply.
PRECISION_TAGS = frozenset({
    ActionTag.TARGETED_EXTRACTION,
    ActionTag.CONSTRAINT_VALIDATION,
    ActionTag.STATE_TRACKING,
})


@dataclass(frozen=True)
class TagBudget:
    tier2_tokens: int
    word_cap: int | None = None


def default_tag_budgets() -> dict[ActionTag, TagBudget]:
    return {
        ActionTag.PROFILE_INJECTION: TagBudget(0, None),
        ActionTag.TARGETED_EXTRACTION: TagBudget(6000, 300),
        ActionTag.TEMPORAL_REASONING: TagBudget(4400, None),
        ActionTag.CONFLICT_RESOLUTION: TagBudget(6000, None),
        ActionTag.BROAD_SUMMARIZATION: TagBudget(8000, None),
        ActionTag.CONSTRAINT_VALIDATION: TagBudget(6000, 200),
        ActionTag.STATE_TRACKING: TagBudget(6000, 150),
    }


@dataclass
class PackBudget:
    global_ceiling: int = GLOBAL_CEILING
    per_tag: dict[ActionTag, TagBudget] = field(default_factory=default_tag_budgets)

    def __post_init__(self):
        if self.global_ceiling < 0:
            raise ValueError("global_ceiling must be >= 0")
        for tag, tb in self.per_tag.items():
            if tb.tier2_tokens < 0:
                raise ValueError(f"negative budget for {tag.value}")
            if self.global_ceiling < tb.tier2_tokens:
                raise ValueError("ceiling must cover every single tier budget")

    def for_tag(self, tag: ActionTag) -> TagBudget:
        return self.per_tag[tag]


@dataclass
class PackedContext:
    text: str
    sections: dict[str, int]
    total_tokens: int
    dropped: list[str] = field(default_factory=list)


def dedup_jaccard(chunks: list[AnnotatedChunk],
                  threshold: float = JACCARD_THRESHOLD) -> list[AnnotatedChunk]:
    """Drop near-duplicates by token-set Jaccard, keeping the higher score.

    Survivors come back in their original input order.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    token_sets = {id(c): set(tokenize(c.chunk.text)) for c in chunks}
    by_priority = sorted(chunks, key=lambda c: (-c.score, c.chunk_id))
    kept_ids: set[int] = set()
    for cand in by_priority:
        cand_tokens = token_sets[id(cand)]
        duplicate = False
        for other in chunks:
            if id(other) not in kept_ids:
                continue
            a, b = cand_tokens, token_sets[id(other)]
            union = a | b
            if union and len(a & b) / len(union) >= threshold:
                duplicate = True
                break
            if not union:  # both empty: identical
                duplicate = True
                break
        if not duplicate:
            kept_ids.add(id(cand))
    return [c for c in chunks if id(c) in kept_ids]


def sentence_extract(chunk: AnnotatedChunk, query: str, embedder=None) -> AnnotatedChunk:
    """Keep the two most query-relevant sentences of a chunk, original order.

    Relevance is the normalized sum of dense cosine and query-token overlap.
    Chunks of two or fewer sentences pass through untouched.
    """
    sentences = split_sentences(chunk.chunk.text)
    if len(sentences) <= 2:
        return chunk
    ranked = sorted(
        range(len(sentences)),
        key=lambda i: (-_sentence_relevance(sentences[i], query, embedder), i))
    keep = sorted(ranked[:2])
    new_text = " ".join(sentences[i] for i in keep)
    return dataclasses.replace(
        chunk, chunk=dataclasses.replace(chunk.chunk, text=new_text))


def apply_word_cap(chunk: AnnotatedChunk, cap_words: int | None) -> AnnotatedChunk:
    """Truncate chunk text to its first cap_words whitespace words."""
    if cap_words is None:
        return chunk
    if cap_words <= 0:
        raise ValueError("cap_words must be positive when set")
    words = chunk.chunk.text.split()
    if len(words) <= cap_words:
        return chunk
    new_text = " ".join(words[:cap_words]) + " " + ELLIPSIS_MARKER
    return dataclasses.replace(
        chunk, chunk=dataclasses.replace(chunk.chunk, text=new_text))


def _section_text(header: str, blocks: list[str]) -> str:
    if not blocks:
        return ""
    return header + "\n" + "\n\n".join(blocks)


def pack(bundle: EvidenceBundle, budget: PackBudget, counter,
         query: str = "", embedder=None) -> PackedContext:
    """Compile an evidence bundle into the final budgeted context string."""
    tag_budget = budget.for_tag(bundle.tag)
    ceiling = budget.global_ceiling

    pinned_section = _section_text(PINNED_HEADER, [bundle.pinned]) if bundle.pinned else ""
    pinned_tokens = counter.count_tokens(pinned_section)
    if pinned_tokens > ceiling:
        raise PinnedOverflow(
            f"pinned content is {pinned_tokens} tokens, ceiling is {ceiling}")

    # Summaries slot: whatever the ceiling leaves after pinned and the tag's
    # guaranteed episodic budget; lowest-relevance entries go first.
    summary_alloc = max(0, ceiling - pinned_tokens - tag_budget.tier2_tokens)
    entries = list(bundle.summaries)

    def summary_section() -> str:
        return _section_text(SUMMARY_HEADER, [e.text for e in entries])

    while entries and counter.count_tokens(summary_section()) > summary_alloc:
        drop_idx = min(range(len(entries)),
                       key=lambda i: (entries[i].relevance, -i))
        del entries[drop_idx]
    summaries_section = summary_section()
    summary_tokens = counter.count_tokens(summaries_section)

    # Episodic slot: per-chunk reductions, then greedy prefix selection in
    # priority order under everything the higher slots left unused.
    chunks = dedup_jaccard(bundle.episodic)
    if bundle.tag in PRECISION_TAGS and query:
        chunks = [sentence_extract(c, query, embedder) for c in chunks]
    if tag_budget.word_cap is not None:
        chunks = [apply_word_cap(c, tag_budget.word_cap) for c in chunks]

    if bundle.select_by_position:
        priority = list(chunks)
    else:
        priority = sorted(chunks, key=lambda c: (-c.score, c.chunk_id))

    episodic_budget = ceiling - pinned_tokens - summary_tokens
    header_tokens = counter.count_tokens(EPISODIC_HEADER)
    survivors: list[AnnotatedChunk] = []
    used = header_tokens
    dropped: list[str] = [c.chunk_id for c in bundle.episodic
                          if c.chunk_id not in {k.chunk_id for k in chunks}]
    for i, cand in enumerate(priority):
        cost = counter.count_tokens(cand.rendered())
        if used + cost <= episodic_budget:
            survivors.append(cand)
            used += cost
        else:
            dropped.extend(c.chunk_id for c in priority[i:])
            break

    def render(survivor_list: list[AnnotatedChunk]) -> tuple[str, str, int, int]:
        if bundle.preserve_order:
            ordered = [c for c in chunks if any(c is s for s in survivor_list)]
        else:
            ordered = sorted(survivor_list, key=lambda c: (-c.score, c.chunk_id))
        section = _section_text(EPISODIC_HEADER, [c.rendered() for c in ordered])
        parts = [p for p in (pinned_section, summaries_section, section) if p]
        text = "\n\n".join(parts)
        return section, text, counter.count_tokens(section), counter.count_tokens(text)

    episodic_section, text, episodic_tokens, total = render(survivors)
    # Safety net for non-additive counters: shed lowest-priority survivors
    # until the assembled text honors the ceiling.
    while total > ceiling and survivors:
        victim = survivors[-1]
        survivors = survivors[:-1]
        dropped.append(victim.chunk_id)
        episodic_section, text, episodic_tokens, total = render(survivors)
    while total > ceiling and entries:
        drop_idx = min(range(len(entries)), key=lambda i: (entries[i].relevance, -i))
        del entries[drop_idx]
        summaries_section = summary_section()
        summary_tokens = counter.count_tokens(summaries_section)
        episodic_section, text, episodic_tokens, total = render(survivors)

    return PackedContext(
        text=text,
        sections={"pinned": pinned_tokens, "summaries": summary_tokens,
                  "episodic": episodic_tokens},
        total_tokens=total,
        dropped=dropped,
    )


def plain_concat(bundle: EvidenceBundle, ceiling: int, counter) -> PackedContext:
    """Packer ablation: raw chunk concatenation up to the ceiling, no slots."""
    blocks: list[str] = []
    if bundle.pinned:
        blocks.append(bundle.pinned)
    blocks.extend(c.chunk.text for c in bundle.episodic)
    kept: list[str] = []
    dropped: list[str] = []
    used = 0
    episodic_ids = [c.chunk_id for c in bundle.episodic]
    for i, block in enumerate(blocks):
        cost = counter.count_tokens(block)
        if used + cost <= ceiling:
            kept.append(block)
            used += cost
        else:
            offset = i - (1 if bundle.pinned else 0)
            dropped.extend(episodic_ids[max(offset, 0):])
            break
    text = "\n\n".join(kept)
    total = counter.count_tokens(text)
    return PackedContext(text=text, sections={"concat": total},
                         total_tokens=total, dropped=dropped)
