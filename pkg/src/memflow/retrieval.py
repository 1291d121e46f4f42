"""Hybrid BM25+dense retrieval with reciprocal rank fusion and anchor extraction.

Tokenization is lowercase split on non-alphanumerics everywhere. BM25 uses
the +1-smoothed Okapi idf, ln(1 + (N - df + 0.5) / (df + 0.5)), so scores
are always non-negative. All rankings break ties by chunk_id ascending,
which makes every result list a deterministic total order.
"""
from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmbedderError, IndexBuildError
from .store import Chunk
from .textutil import content_tokens, stopwords, tokenize

DEFAULT_DENSE_DIM = 384


@dataclass(frozen=True)
class RetrievalParams:
    k1: float = 1.5
    b: float = 0.75
    rrf_k: int = 60
    base_top_k: int = 8
    tier2_top_k: int = 20
    tier2_doc_top_k: int = 40
    tier3_top_k: int = 20
    tier3_broad_top_k: int = 80

    def __post_init__(self):
        for name in ("k1", "b", "rrf_k", "base_top_k", "tier2_top_k",
                     "tier2_doc_top_k", "tier3_top_k", "tier3_broad_top_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Anchor:
    text: str
    kind: str  # name | quoted | numeric-date | noun-phrase | event


@dataclass
class ScoredChunk:
    chunk_id: str
    score: float
    rank_sources: list[str] = field(default_factory=list)


class HashingEmbedder:
    """Deterministic feature-hashed unigram term-frequency embedder.

    Tokens are bucketed by crc32 into a fixed-width vector which is then
    L2-normalized. No model weights, identical output on every run; this is
    the offline default so the whole test suite works without downloads.
    """

    def __init__(self, dim: int = DEFAULT_DENSE_DIM):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            for tok in tokenize(text):
                out[i, zlib.crc32(tok.encode("utf-8")) % self.dim] += 1.0
        norms = np.linalg.norm(out, axis=1)
        nonzero = norms > 0
        out[nonzero] /= norms[nonzero, None]
        return out


class HttpEmbedder:
    """OpenAI-style /v1/embeddings client for production dense encoding."""

    def __init__(self, endpoint: str, model: str = "default",
                 dim: int = DEFAULT_DENSE_DIM, timeout: float = 60.0):
        import requests  # local import keeps offline paths requests-free

        self._requests = requests
        if "/embeddings" not in endpoint:
            endpoint = endpoint.rstrip("/") + "/v1/embeddings"
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.timeout = timeout

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float32)
        try:
            resp = self._requests.post(
                self.endpoint, json={"model": self.model, "input": texts},
                timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()["data"]
        except Exception as exc:
            raise EmbedderError(f"embedding endpoint failed: {exc}") from exc
        vectors = np.asarray([row["embedding"] for row in data], dtype=np.float32)
        if vectors.shape != (len(texts), self.dim):
            raise EmbedderError(
                f"expected shape {(len(texts), self.dim)}, got {vectors.shape}")
        norms = np.linalg.norm(vectors, axis=1)
        nonzero = norms > 0
        vectors[nonzero] /= norms[nonzero, None]
        return vectors


@dataclass
class HybridIndex:
    postings: dict[str, dict[str, int]]
    doc_lengths: dict[str, int]
    avgdl: float
    doc_count: int
    vectors: np.ndarray
    vector_ids: list[str]
    chunks: dict[str, Chunk]
    embedder: object
    params: RetrievalParams = field(default_factory=RetrievalParams)


def build_index(chunks: list[Chunk], embedder=None,
                params: RetrievalParams | None = None) -> HybridIndex:
    """Build the inverted index and dense matrix over a chunk list."""
    embedder = embedder or HashingEmbedder()
    params = params or RetrievalParams()
    postings: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    registry: dict[str, Chunk] = {}
    for chunk in chunks:
        if chunk.chunk_id in registry:
            raise IndexBuildError(f"duplicate chunk_id {chunk.chunk_id!r}")
        if not chunk.text:
            raise IndexBuildError(f"empty chunk text for {chunk.chunk_id!r}")
        registry[chunk.chunk_id] = chunk
        toks = tokenize(chunk.text)
        doc_lengths[chunk.chunk_id] = len(toks)
        for tok in toks:
            postings.setdefault(tok, {}).setdefault(chunk.chunk_id, 0)
            postings[tok][chunk.chunk_id] += 1
    ids = [c.chunk_id for c in chunks]
    vectors = embedder.embed([registry[cid].text for cid in ids]) if ids else \
        np.zeros((0, getattr(embedder, "dim", DEFAULT_DENSE_DIM)), dtype=np.float32)
    if not np.all(np.isfinite(vectors)):
        raise EmbedderError("embedder produced non-finite components")
    avgdl = sum(doc_lengths.values()) / len(doc_lengths) if doc_lengths else 0.0
    return HybridIndex(postings=postings, doc_lengths=doc_lengths, avgdl=avgdl,
                       doc_count=len(ids), vectors=vectors, vector_ids=ids,
                       chunks=registry, embedder=embedder, params=params)


def bm25_rank(index: HybridIndex, query: str,
              params: RetrievalParams | None = None) -> list[ScoredChunk]:
    """Okapi BM25 ranking; documents scoring zero are excluded."""
    params = params or index.params
    if index.doc_count == 0:
        return []
    scores: dict[str, float] = {}
    n = index.doc_count
    for term in dict.fromkeys(tokenize(query)):
        posting = index.postings.get(term)
        if not posting:
            continue
        df = len(posting)
        idf = np.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for cid, tf in posting.items():
            norm = tf + params.k1 * (1 - params.b + params.b * index.doc_lengths[cid] / index.avgdl)
            scores[cid] = scores.get(cid, 0.0) + idf * tf * (params.k1 + 1) / norm
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [ScoredChunk(cid, s, ["bm25"]) for cid, s in ranked]


def dense_rank(index: HybridIndex, query: str, embedder=None) -> list[ScoredChunk]:
    """Cosine similarity against stored vectors, descending.

    A zero query vector (or zero chunk vector) has undefined similarity and
    is excluded rather than ranked.
    """
    embedder = embedder or index.embedder
    if index.doc_count == 0:
        return []
    qv = embedder.embed([query])[0].astype(np.float32)
    norm = float(np.linalg.norm(qv))
    if norm == 0.0:
        return []
    qv = qv / norm
    sims = index.vectors @ qv
    rows = []
    for i, cid in enumerate(index.vector_ids):
        if not index.vectors[i].any():
            continue
        rows.append((cid, float(sims[i])))
    rows.sort(key=lambda kv: (-kv[1], kv[0]))
    return [ScoredChunk(cid, s, ["dense"]) for cid, s in rows]


def rrf_fuse(rankings: list[list[ScoredChunk]], rrf_k: int = 60) -> list[ScoredChunk]:
    """Reciprocal rank fusion: score(d) = sum over rankings of 1/(k + rank).

    Ranks are 1-based; a document absent from a ranking contributes nothing
    for it. Output order is invariant to the order rankings are supplied.
    """
    if rrf_k <= 0:
        raise ValueError("rrf_k must be positive")
    fused: dict[str, float] = {}
    sources: dict[str, list[str]] = {}
    for ranking in rankings:
        for rank, item in enumerate(ranking, start=1):
            fused[item.chunk_id] = fused.get(item.chunk_id, 0.0) + 1.0 / (rrf_k + rank)
            src = sources.setdefault(item.chunk_id, [])
            for label in item.rank_sources:
                if label not in src:
                    src.append(label)
    ranked = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return [ScoredChunk(cid, s, sorted(sources.get(cid, []))) for cid, s in ranked]


def hybrid_search(index: HybridIndex, query: str, top_k: int,
                  params: RetrievalParams | None = None,
                  label: str = "primary") -> list[ScoredChunk]:
    """One fused BM25+dense pass, cut to top_k, tagged with a pass label."""
    params = params or index.params
    fused = rrf_fuse([bm25_rank(index, query, params), dense_rank(index, query)],
                     params.rrf_k)
    out = []
    for item in fused[:top_k]:
        out.append(ScoredChunk(item.chunk_id, item.score, [label]))
    return out


# --- anchor extraction -------------------------------------------------

_QUOTED_RES = (
    re.compile(r"\"([^\"]+)\""),
    re.compile(r"(?:^|(?<=\s))'([^']+)'(?=$|[\s.,!?;:])"),
    re.compile(r"“([^”]+)”"),
)
_MONTH_WORD = (
    r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|jun(?:e)?|"
    r"jul(?:y)?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|"
    r"dec(?:ember)?)"
)
_DATE_SPAN_RES = (
    re.compile(r"\b\d{4}-\d{2}-\d{2}\b"),
    re.compile(rf"\b{_MONTH_WORD}\.?\s+\d{{1,2}}(?:st|nd|rd|th)?,?\s+\d{{4}}\b", re.I),
    re.compile(rf"\b{_MONTH_WORD}\s+\d{{4}}\b", re.I),
    re.compile(r"\b\d{1,2}/\d{1,2}/\d{4}\b"),
    re.compile(r"\b(?:19|20)\d{2}\b"),
)
_WORD_RE = re.compile(r"[A-Za-z][A-Za-z'\-]*")
_CAP_RE = re.compile(r"^[A-Z]")
_MY_PHRASE_RE = re.compile(r"\bmy\s+([a-z][a-z\-]*)", re.I)
_POSSESSIVE_RE = re.compile(r"\b[A-Za-z]+'s\s+([a-z][a-z\-]*)")


def _mask(text: str, start: int, end: int) -> str:
    return text[:start] + " " * (end - start) + text[end:]


def _is_stop_only(text: str) -> bool:
    toks = tokenize(text)
    return not toks or all(t in stopwords() for t in toks)


def extract_anchors(query: str) -> list[Anchor]:
    """Deterministic lightweight span parser for secondary retrieval passes.

    Finds, in priority order: quoted strings, numeric/date expressions,
    capitalized name spans (skipping spans that are only the sentence-initial
    word), and noun phrases adjacent to possessive markers ("my X", "X's Y").
    Stopword-only spans are discarded; results dedupe case-insensitively.
    """
    anchors: list[Anchor] = []
    seen: set[str] = set()

    def add(text: str, kind: str):
        text = text.strip()
        if not text or _is_stop_only(text):
            return
        key = text.lower()
        if key in seen:
            return
        seen.add(key)
        anchors.append(Anchor(text=text, kind=kind))

    working = query
    for pattern in _QUOTED_RES:
        for m in list(pattern.finditer(working)):
            add(m.group(1), "quoted")
            working = _mask(working, m.start(), m.end())
    for pattern in _DATE_SPAN_RES:
        for m in list(pattern.finditer(working)):
            add(m.group(0), "numeric-date")
            working = _mask(working, m.start(), m.end())

    sentence_starts = {0}
    for m in re.finditer(r"[.!?]\s+", working):
        sentence_starts.add(m.end())
    words = list(_WORD_RE.finditer(working))
    run: list[re.Match] = []
    runs: list[list[re.Match]] = []
    for w in words:
        if _CAP_RE.match(w.group(0)):
            if run and working[run[-1].end():w.start()].strip():
                runs.append(run)
                run = []
            run.append(w)
        else:
            if run:
                runs.append(run)
            run = []
    if run:
        runs.append(run)
    for r in runs:
        if len(r) == 1 and r[0].start() in sentence_starts:
            continue
        words_clean = [re.sub(r"'s$", "", w.group(0)) for w in r]
        add(" ".join(words_clean), "name")

    for m in _MY_PHRASE_RE.finditer(working):
        add(m.group(1), "noun-phrase")
    for m in _POSSESSIVE_RE.finditer(working):
        add(m.group(1), "noun-phrase")
    return anchors


def extract_event_anchors(query: str) -> list[Anchor]:
    """Pick up to two event spans for dual-anchor temporal retrieval.

    Candidates are the two sides of a "between X and Y" / "from X to Y"
    construct, otherwise clause splits on conjunctions and punctuation,
    plus any date-bearing span. Spans are scored by how many of the
    question's content terms they contain; ties go to the earlier span.
    """
    candidates: list[tuple[int, str]] = []  # (position, text)
    m = re.search(r"\bbetween\b(.+?)\band\b(.+)$", query, re.I)
    if m is None:
        m = re.search(r"\bfrom\b(.+?)\bto\b(.+)$", query, re.I)
    if m is not None:
        candidates.append((m.start(1), m.group(1)))
        candidates.append((m.start(2), m.group(2)))
    else:
        parts = re.split(r",|;|\band\b|\bor\b|\bthen\b|\bbefore\b|\bafter\b|\buntil\b",
                         query, flags=re.I)
        if len(parts) > 1:
            pos = 0
            for part in parts:
                idx = query.find(part, pos)
                candidates.append((idx if idx >= 0 else pos, part))
                pos = (idx if idx >= 0 else pos) + len(part)
    masked = query
    for pattern in _DATE_SPAN_RES:
        for dm in list(pattern.finditer(masked)):
            candidates.append((dm.start(), dm.group(0)))
            masked = _mask(masked, dm.start(), dm.end())

    scored: list[tuple[int, int, str]] = []  # (-overlap, position, text)
    seen: set[str] = set()
    for pos, raw in candidates:
        text = raw.strip().strip("?.!,;: ")
        if not text:
            continue
        toks = content_tokens(text)
        if not toks:
            continue
        key = text.lower()
        if key in seen:
            continue
        seen.add(key)
        scored.append((-len(toks), pos, text))
    scored.sort()
    top = sorted(scored[:2], key=lambda t: t[1])  # restore query order
    return [Anchor(text=t[2], kind="event") for t in top]


def merge_passes(passes: list[list[ScoredChunk]]) -> list[ScoredChunk]:
    """Union pass results, dedupe by chunk id keeping the max score."""
    best: dict[str, ScoredChunk] = {}
    for ranking in passes:
        for item in ranking:
            cur = best.get(item.chunk_id)
            if cur is None:
                best[item.chunk_id] = ScoredChunk(item.chunk_id, item.score,
                                                  list(item.rank_sources))
            else:
                cur.score = max(cur.score, item.score)
                for label in item.rank_sources:
                    if label not in cur.rank_sources:
                        cur.rank_sources.append(label)
    return sorted(best.values(), key=lambda c: (-c.score, c.chunk_id))


def multipass_retrieve(index: HybridIndex, query: str, top_k: int,
                       params: RetrievalParams | None = None) -> list[ScoredChunk]:
    """Entity-aware retrieval: one primary pass plus one pass per anchor."""
    params = params or index.params
    passes = [hybrid_search(index, query, top_k, params, label="primary")]
    for anchor in extract_anchors(query):
        passes.append(hybrid_search(index, anchor.text, params.base_top_k, params,
                                    label=f"anchor:{anchor.text}"))
    return merge_passes(passes)


def dual_anchor_retrieve(index: HybridIndex, query: str,
                         params: RetrievalParams | None = None) -> list[ScoredChunk]:
    """Temporal retrieval: one pass per event anchor, merged like multipass.

    With no extractable event span the full query runs as a single pass.
    """
    params = params or index.params
    anchors = extract_event_anchors(query)
    if not anchors:
        return hybrid_search(index, query, params.tier3_top_k, params, label="primary")
    passes = [hybrid_search(index, a.text, params.tier3_top_k, params,
                            label=f"event:{a.text}") for a in anchors]
    return merge_passes(passes)


# --- dense vector cache ------------------------------------------------

def save_vector_cache(ids: list[str], vectors: np.ndarray, path) -> None:
    """Binary cache: little-endian {count: u32, dim: u32} header then f32 data.

    Chunk ids go to a JSON sidecar at ``<path>.ids``.
    """
    path = Path(path)
    count, dim = vectors.shape
    if count != len(ids):
        raise ValueError("ids length must match vector count")
    with path.open("wb") as fh:
        fh.write(struct.pack("<II", count, dim))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    Path(str(path) + ".ids").write_text(json.dumps(ids), encoding="utf-8")


def load_vector_cache(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    count, dim = struct.unpack("<II", raw[:8])
    vectors = np.frombuffer(raw[8:], dtype="<f4").reshape(count, dim).copy()
    ids = json.loads(Path(str(path) + ".ids").read_text(encoding="utf-8"))
    if len(ids) != count:
        raise ValueError("sidecar id count does not match header")
    return ids, vectors
