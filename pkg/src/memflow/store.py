"""Conversation history store: ingestion, chunking, profile compilation, persistence.

The store is immutable after ingest/load; any number of in-flight queries
may read it concurrently. The on-disk format is line-delimited JSON with a
version header, plus a ``.profile`` sidecar holding one fact per line.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import BadTimestamp, CorruptStore, MalformedRecord

STORE_VERSION = 1
DEFAULT_TURNS_PER_CHUNK = 3

# First-person statement patterns feeding the user profile. Each entry maps
# a phrase to the fact category it produces. Order matters: the first
# matching phrase decides the category of a sentence.
DEFAULT_PROFILE_PATTERNS: tuple[tuple[str, str], ...] = (
    ("i prefer", "preference"),
    ("my favorite", "preference"),
    ("i don't like", "preference"),
    ("i like", "preference"),
    ("i am a", "identity"),
    ("i live in", "location"),
    ("i work", "work"),
    ("i always", "habit"),
    ("i never", "habit"),
)

_TS_FORMATS = (
    "%Y-%m-%d %H:%M:%S",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d",
    "%B %d, %Y",
    "%d %B %Y",
    "%d %B, %Y",
    "%I:%M %p on %d %B, %Y",
)


def parse_timestamp(value) -> datetime:
    """Normalize a timestamp to a timezone-aware UTC datetime.

    Accepts datetimes and common string layouts; a bare date gets time
    00:00:00. Raises BadTimestamp when nothing parses.
    """
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, str):
        raw = value.strip()
        dt = None
        try:
            dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
        except ValueError:
            for fmt in _TS_FORMATS:
                try:
                    dt = datetime.strptime(raw, fmt)
                    break
                except ValueError:
                    continue
        if dt is None:
            raise BadTimestamp(f"unparseable timestamp: {value!r}")
    else:
        raise BadTimestamp(f"unparseable timestamp: {value!r}")
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass
class Turn:
    role: str
    text: str
    turn_index: int


@dataclass
class Session:
    session_id: str
    timestamp: datetime
    turns: list[Turn] = field(default_factory=list)


@dataclass
class ConversationHistory:
    sessions: list[Session] = field(default_factory=list)
    source_label: str = ""

    def all_turns(self) -> list[Turn]:
        return [t for s in self.sessions for t in s.turns]


@dataclass
class Chunk:
    chunk_id: str
    session_id: str
    session_timestamp: datetime | None
    text: str
    turn_span: tuple[int, int]


@dataclass
class ProfileFact:
    key: str
    value: str
    session_id: str
    timestamp: datetime | None


@dataclass
class UserProfile:
    facts: list[ProfileFact] = field(default_factory=list)

    def render(self) -> str:
        """Deterministic text rendering: keys alphabetical, newest fact first."""
        if not self.facts:
            return ""
        by_key: dict[str, list[ProfileFact]] = {}
        for fact in self.facts:
            by_key.setdefault(fact.key, []).append(fact)
        lines: list[str] = []
        for key in sorted(by_key):
            lines.append(f"{key}:")
            newest_first = sorted(
                by_key[key],
                key=lambda f: f.timestamp or datetime.min.replace(tzinfo=timezone.utc),
                reverse=True,
            )
            for fact in newest_first:
                date = f" ({fact.timestamp.date().isoformat()})" if fact.timestamp else ""
                lines.append(f"- {fact.value}{date}")
        return "\n".join(lines)


@dataclass
class MemoryStore:
    history: ConversationHistory
    profile: UserProfile


def ingest_history(raw, source_label: str = "") -> ConversationHistory:
    """Validate raw session records and produce an ordered history.

    Each record needs session_id, timestamp, and turns ({role, text}).
    Sessions come back sorted by timestamp (ties by session_id);
    whitespace-only turn texts are dropped.
    """
    sessions: list[Session] = []
    seen_ids: set[str] = set()
    for rec in raw:
        for key in ("session_id", "timestamp", "turns"):
            if key not in rec:
                raise MalformedRecord(f"session record missing field {key!r}")
        sid = str(rec["session_id"])
        if sid in seen_ids:
            raise MalformedRecord(f"duplicate session_id {sid!r}")
        seen_ids.add(sid)
        ts = parse_timestamp(rec["timestamp"])
        turns: list[Turn] = []
        for t in rec["turns"]:
            for key in ("role", "text"):
                if key not in t:
                    raise MalformedRecord(f"turn record missing field {key!r}")
            text = str(t["text"]).strip()
            if not text:
                continue
            turns.append(Turn(role=str(t["role"]), text=text, turn_index=len(turns)))
        sessions.append(Session(session_id=sid, timestamp=ts, turns=turns))
    sessions.sort(key=lambda s: (s.timestamp, s.session_id))
    return ConversationHistory(sessions=sessions, source_label=source_label)


def chunk_history(history: ConversationHistory,
                  turns_per_chunk: int = DEFAULT_TURNS_PER_CHUNK) -> list[Chunk]:
    """Partition every session into fixed-size runs of turns.

    Chunks never span sessions; every turn lands in exactly one chunk.
    Chunk text is role-prefixed turns joined by newlines.
    """
    if turns_per_chunk < 1:
        raise ValueError("turns_per_chunk must be >= 1")
    chunks: list[Chunk] = []
    for session in history.sessions:
        for start in range(0, len(session.turns), turns_per_chunk):
            group = session.turns[start:start + turns_per_chunk]
            first, last = group[0].turn_index, group[-1].turn_index
            text = "\n".join(f"{t.role}: {t.text}" for t in group)
            chunks.append(Chunk(
                chunk_id=f"{session.session_id}:{first}-{last}",
                session_id=session.session_id,
                session_timestamp=session.timestamp,
                text=text,
                turn_span=(first, last),
            ))
    return chunks


def _compile_pattern(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.split()]
    return re.compile(r"\b" + r"\s+".join(words).replace("don't", "don'?t") + r"\b", re.I)


def compile_profile(history: ConversationHistory,
                    patterns: tuple[tuple[str, str], ...] = DEFAULT_PROFILE_PATTERNS,
                    ) -> UserProfile:
    """Extract first-person preference/identity statements into a profile.

    Pure pattern matching over non-assistant turns, no model call. The
    matched sentence becomes the fact value; facts keep history order
    (oldest first), and multiple facts may share a key.
    """
    compiled = [(_compile_pattern(phrase), key) for phrase, key in patterns]
    facts: list[ProfileFact] = []
    for session in history.sessions:
        for turn in session.turns:
            if turn.role.strip().lower() == "assistant":
                continue
            for sentence in _sentences_of(turn.text):
                for pattern, key in compiled:
                    if pattern.search(sentence):
                        facts.append(ProfileFact(
                            key=key,
                            value=sentence,
                            session_id=session.session_id,
                            timestamp=session.timestamp,
                        ))
                        break
    return UserProfile(facts=facts)


def _sentences_of(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+", text.strip())
    return [p.strip() for p in parts if p.strip()]


def build_store(raw, source_label: str = "",
                patterns: tuple[tuple[str, str], ...] = DEFAULT_PROFILE_PATTERNS,
                ) -> MemoryStore:
    history = ingest_history(raw, source_label=source_label)
    return MemoryStore(history=history, profile=compile_profile(history, patterns))


def _session_to_json(session: Session) -> str:
    obj = {
        "session_id": session.session_id,
        "timestamp": session.timestamp.isoformat(),
        "turns": [{"role": t.role, "text": t.text, "turn_index": t.turn_index}
                  for t in session.turns],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_store(store: MemoryStore, path) -> None:
    """Write the history (one session per line) plus the profile sidecar."""
    path = Path(path)
    header = json.dumps(
        {"memflow_store_version": STORE_VERSION, "source_label": store.history.source_label},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    )
    lines = [header] + [_session_to_json(s) for s in store.history.sessions]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    fact_lines = [
        json.dumps({
            "key": f.key,
            "value": f.value,
            "session_id": f.session_id,
            "timestamp": f.timestamp.isoformat() if f.timestamp else None,
        }, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        for f in store.profile.facts
    ]
    Path(str(path) + ".profile").write_text(
        "\n".join(fact_lines) + ("\n" if fact_lines else ""), encoding="utf-8")


def load_store(path) -> MemoryStore:
    """Read a persisted store back; CorruptStore carries the offending line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise CorruptStore("empty store file", line_no=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptStore(f"bad header line: {exc}", line_no=1) from exc
    if not isinstance(header, dict) or "memflow_store_version" not in header:
        raise CorruptStore("missing memflow_store_version header", line_no=1)
    sessions: list[Session] = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            turns = [Turn(role=t["role"], text=t["text"], turn_index=t["turn_index"])
                     for t in obj["turns"]]
            sessions.append(Session(
                session_id=obj["session_id"],
                timestamp=parse_timestamp(obj["timestamp"]),
                turns=turns,
            ))
        except (json.JSONDecodeError, KeyError, TypeError, BadTimestamp) as exc:
            raise CorruptStore(f"bad session line: {exc}", line_no=i) from exc
    history = ConversationHistory(sessions=sessions,
                                  source_label=header.get("source_label", ""))
    profile_path = Path(str(path) + ".profile")
    if profile_path.exists():
        facts: list[ProfileFact] = []
        for i, line in enumerate(profile_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ts = parse_timestamp(obj["timestamp"]) if obj.get("timestamp") else None
                facts.append(ProfileFact(key=obj["key"], value=obj["value"],
                                         session_id=obj["session_id"], timestamp=ts))
            except (json.JSONDecodeError, KeyError, TypeError, BadTimestamp) as exc:
                raise CorruptStore(f"bad profile line: {exc}", line_no=i) from exc
        profile = UserProfile(facts=facts)
    else:
        profile = compile_profile(history)
    return MemoryStore(history=history, profile=profile)
