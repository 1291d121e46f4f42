"""Memory-tier executors: profile lookup, targeted retrieval, per-tag preprocessing.

Every executor is a pure function over the immutable store/index and issues
zero model calls; all evidence transformation completes before any model
inference happens downstream.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import EmptyProfile
from .retrieval import (HybridIndex, RetrievalParams, ScoredChunk,
                        dual_anchor_retrieve, extract_anchors, hybrid_search,
                        multipass_retrieve)
from .router import ActionTag, RouterDecision, TIER3_TAGS
from .store import Chunk, UserProfile
from .textutil import content_tokens, extract_dates, jaccard, split_sentences, tokenize

MAP_SHARD_TURNS = 5
SHARD_TOP_SENTENCES = 2
SHARD_DEDUP_THRESHOLD = 0.85
_MODAL_RE = re.compile(
    r"\b(?:always|never|must|allowed|should\s+not|cannot|required|forbidden)\b",
    re.IGNORECASE)

_EPOCH = datetime.min.replace(tzinfo=timezone.utc)


@dataclass
class AnnotatedChunk:
    chunk: Chunk
    score: float
    rank_sources: list[str] = field(default_factory=list)
    stale_flag: bool = False
    date_labels: list[str] = field(default_factory=list)
    section_header: str = ""

    @property
    def chunk_id(self) -> str:
        return self.chunk.chunk_id

    @property
    def session_timestamp(self):
        return self.chunk.session_timestamp

    def rendered(self) -> str:
        """Deterministic display text used by the packer."""
        prefix = "[OUTDATED] " if self.stale_flag else ""
        if self.section_header:
            return f"{self.section_header}\n{prefix}{self.chunk.text}"
        if self.chunk.session_timestamp is not None:
            date = self.chunk.session_timestamp.date().isoformat()
            return f"[{date}] {prefix}{self.chunk.text}"
        return f"{prefix}{self.chunk.text}"


@dataclass
class SummaryEntry:
    text: str
    relevance: float


@dataclass
class EvidenceBundle:
    tag: ActionTag
    pinned: str = ""
    summaries: list[SummaryEntry] = field(default_factory=list)
    episodic: list[AnnotatedChunk] = field(default_factory=list)
    # Chronologically prepared tags render in bundle order; broad additionally
    # selects survivors by bundle position to keep the session-diversity
    # guarantee intact under truncation.
    preserve_order: bool = False
    select_by_position: bool = False


def annotate(index: HybridIndex, scored: list[ScoredChunk]) -> list[AnnotatedChunk]:
    return [AnnotatedChunk(chunk=index.chunks[s.chunk_id], score=s.score,
                           rank_sources=list(s.rank_sources)) for s in scored]


def execute_tier1(profile: UserProfile, query: str) -> EvidenceBundle:
    """Profile lookup: no retrieval at all, the rendered profile is pinned."""
    if not profile.facts:
        raise EmptyProfile("no profile facts compiled for this history")
    return EvidenceBundle(tag=ActionTag.PROFILE_INJECTION, pinned=profile.render())


def execute_tier2(index: HybridIndex, query: str,
                  params: RetrievalParams | None = None,
                  document_mode: bool = False) -> EvidenceBundle:
    """Targeted multi-pass retrieval at the tier-2 depth (deeper for documents)."""
    params = params or index.params
    top_k = params.tier2_doc_top_k if document_mode else params.tier2_top_k
    scored = multipass_retrieve(index, query, top_k, params)
    return EvidenceBundle(tag=ActionTag.TARGETED_EXTRACTION,
                          episodic=annotate(index, scored))


def chronological_sort(chunks: list[AnnotatedChunk]) -> list[AnnotatedChunk]:
    """Ascending session timestamp, ties by turn span start; labels dates.

    Stable and idempotent; undated chunks sort after dated ones in their
    input order.
    """
    for c in chunks:
        c.date_labels = extract_dates(c.chunk.text)
    return sorted(chunks, key=lambda c: (
        c.session_timestamp is None,
        c.session_timestamp or _EPOCH,
        c.chunk.turn_span[0],
    ))


def recency_filter(chunks: list[AnnotatedChunk]) -> list[AnnotatedChunk]:
    """Mark superseded facts: within each shared-anchor group every chunk but
    the newest gets stale_flag. A chunk that is the newest member of any of
    its groups is never flagged. Output is chronological (newest last)."""
    anchor_map: dict[str, list[int]] = {}
    for i, c in enumerate(chunks):
        for anchor in extract_anchors(c.chunk.text):
            anchor_map.setdefault(anchor.text.lower(), []).append(i)

    def order_key(i: int):
        c = chunks[i]
        return (c.session_timestamp or _EPOCH, c.chunk.turn_span[0], i)

    in_shared_group = [False] * len(chunks)
    newest_of_some_group = [False] * len(chunks)
    for members in anchor_map.values():
        if len(set(members)) < 2:
            continue
        members = sorted(set(members), key=order_key)
        for i in members:
            in_shared_group[i] = True
        newest_of_some_group[members[-1]] = True
    for i, c in enumerate(chunks):
        c.stale_flag = in_shared_group[i] and not newest_of_some_group[i]
    return chronological_sort(chunks)


def _sentence_relevance(sentence: str, query: str, embedder) -> float:
    q_content = content_tokens(query)
    overlap = 0.0
    if q_content:
        overlap = len(q_content & set(tokenize(sentence))) / len(q_content)
    cos = 0.0
    if embedder is not None:
        vecs = embedder.embed([query, sentence])
        if vecs[0].any() and vecs[1].any():
            cos = float(np.dot(vecs[0], vecs[1]))
    return (cos + overlap) / 2.0


def diverse_aggregate(index: HybridIndex, query: str,
                      params: RetrievalParams | None = None,
                      ) -> tuple[list[SummaryEntry], list[AnnotatedChunk]]:
    """Broad-summarization preparation with a session-diversity guarantee.

    Retrieves wide, reorders candidates round-robin across sessions, then
    runs extractive map-reduce: turns shard in groups of five, each shard
    keeps its two most query-relevant sentences, shards concatenate under
    per-session headers with near-duplicate shards dropped.
    """
    params = params or index.params
    scored = hybrid_search(index, query, params.tier3_broad_top_k, params, label="broad")
    candidates = annotate(index, scored)

    by_session: dict[str, list[AnnotatedChunk]] = {}
    for c in candidates:
        by_session.setdefault(c.chunk.session_id, []).append(c)
    session_order = sorted(
        by_session,
        key=lambda sid: (-max(c.score for c in by_session[sid]), sid))
    queues = {sid: list(by_session[sid]) for sid in session_order}
    episodic: list[AnnotatedChunk] = []
    while any(queues.values()):
        for sid in session_order:
            if queues[sid]:
                episodic.append(queues[sid].pop(0))

    summaries: list[SummaryEntry] = []
    kept_shard_tokens: list[set[str]] = []
    chrono_sessions = sorted(
        by_session,
        key=lambda sid: (by_session[sid][0].session_timestamp or _EPOCH, sid))
    for sid in chrono_sessions:
        session_chunks = sorted(by_session[sid], key=lambda c: c.chunk.turn_span[0])
        turn_lines = [line for c in session_chunks for line in c.chunk.text.split("\n")]
        shard_texts: list[str] = []
        for start in range(0, len(turn_lines), MAP_SHARD_TURNS):
            shard = turn_lines[start:start + MAP_SHARD_TURNS]
            sentences = [s for line in shard for s in split_sentences(line)]
            if not sentences:
                continue
            ranked = sorted(
                range(len(sentences)),
                key=lambda i: (-_sentence_relevance(sentences[i], query, index.embedder), i))
            keep = sorted(ranked[:SHARD_TOP_SENTENCES])
            shard_text = " ".join(sentences[i] for i in keep)
            shard_tokens = set(tokenize(shard_text))
            if any(jaccard(shard_tokens, prev) >= SHARD_DEDUP_THRESHOLD
                   for prev in kept_shard_tokens):
                continue
            kept_shard_tokens.append(shard_tokens)
            shard_texts.append(shard_text)
        if not shard_texts:
            continue
        ts = by_session[sid][0].session_timestamp
        header = f"Session {sid} ({ts.date().isoformat()}):" if ts else f"Session {sid}:"
        summaries.append(SummaryEntry(
            text=header + "\n" + "\n".join(shard_texts),
            relevance=max(c.score for c in by_session[sid]),
        ))
    return summaries, episodic


def constraint_filter(chunks: list[AnnotatedChunk]) -> list[AnnotatedChunk]:
    """Keep chunks with modal or rule language; keep everything if none match."""
    kept = [c for c in chunks if _MODAL_RE.search(c.chunk.text)]
    return kept if kept else list(chunks)


def state_track_prepare(chunks: list[AnnotatedChunk]) -> list[AnnotatedChunk]:
    """Chronological state-change candidates under dated session headers."""
    seen: set[str] = set()
    unique: list[AnnotatedChunk] = []
    for c in chunks:
        if c.chunk_id in seen:
            continue
        seen.add(c.chunk_id)
        unique.append(c)
    ordered = chronological_sort(unique)
    for c in ordered:
        if c.session_timestamp is not None:
            date = c.session_timestamp.date().isoformat()
            c.section_header = f"Session {c.chunk.session_id} ({date})"
        else:
            c.section_header = f"Session {c.chunk.session_id}"
    return ordered


def execute_tier3(index: HybridIndex, query: str, decision: RouterDecision,
                  params: RetrievalParams | None = None) -> EvidenceBundle:
    """Dispatch the five deep-reasoning tags to their deterministic preparers."""
    params = params or index.params
    tag = decision.action_tag
    if tag not in TIER3_TAGS:
        raise ValueError(f"{tag.value} is not a tier-3 tag")
    if tag is ActionTag.TEMPORAL_REASONING:
        chunks = annotate(index, dual_anchor_retrieve(index, query, params))
        return EvidenceBundle(tag=tag, episodic=chronological_sort(chunks),
                              preserve_order=True)
    if tag is ActionTag.CONFLICT_RESOLUTION:
        chunks = annotate(index, multipass_retrieve(index, query, params.tier3_top_k, params))
        return EvidenceBundle(tag=tag, episodic=recency_filter(chunks),
                              preserve_order=True)
    if tag is ActionTag.BROAD_SUMMARIZATION:
        summaries, episodic = diverse_aggregate(index, query, params)
        return EvidenceBundle(tag=tag, summaries=summaries, episodic=episodic,
                              preserve_order=True, select_by_position=True)
    if tag is ActionTag.CONSTRAINT_VALIDATION:
        chunks = annotate(index, multipass_retrieve(index, query, params.tier3_top_k, params))
        return EvidenceBundle(tag=tag, episodic=constraint_filter(chunks))
    chunks = annotate(index, multipass_retrieve(index, query, params.tier3_top_k, params))
    return EvidenceBundle(tag=tag, episodic=state_track_prepare(chunks),
                          preserve_order=True)
