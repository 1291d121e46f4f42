"""Shared text helpers: tokenization, stopwords, sentences, dates, Jaccard."""
from __future__ import annotations

import datetime as _dt
import re
from functools import lru_cache
from importlib import resources

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_SENT_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")

_MONTHS = {
    "jan": 1, "january": 1, "feb": 2, "february": 2, "mar": 3, "march": 3,
    "apr": 4, "april": 4, "may": 5, "jun": 6, "june": 6, "jul": 7,
    "july": 7, "aug": 8, "august": 8, "sep": 9, "sept": 9, "september": 9,
    "oct": 10, "october": 10, "nov": 11, "november": 11, "dec": 12,
    "december": 12,
}
_MONTH_ALT = "|".join(sorted(_MONTHS, key=len, reverse=True))

_ISO_DATE_RE = re.compile(r"\b(\d{4})-(\d{2})-(\d{2})\b")
_MDY_RE = re.compile(
    rf"\b({_MONTH_ALT})\.?\s+(\d{{1,2}})(?:st|nd|rd|th)?,?\s+(\d{{4}})\b", re.I
)
_SLASH_RE = re.compile(r"\b(\d{1,2})/(\d{1,2})/(\d{4})\b")


@lru_cache(maxsize=32)
def read_asset(name: str) -> str:
    return resources.files("memflow").joinpath(f"assets/{name}").read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    return frozenset(read_asset("stopwords.txt").split())


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens (split on everything else)."""
    return _TOKEN_RE.findall(text.lower())


def content_tokens(text: str) -> set[str]:
    """Distinct tokens with stopwords removed."""
    return set(tokenize(text)) - stopwords()


def split_sentences(text: str) -> list[str]:
    parts = _SENT_SPLIT_RE.split(text.strip())
    return [p.strip() for p in parts if p.strip()]


def jaccard(a: set[str], b: set[str]) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def _safe_iso(year: int, month: int, day: int) -> str | None:
    try:
        return _dt.date(year, month, day).isoformat()
    except ValueError:
        return None


def extract_dates(text: str) -> list[str]:
    """ISO-normalized dates found in text, in order of appearance, deduped.

    Recognizes YYYY-MM-DD, "Month DD, YYYY" (month names or abbreviations),
    and MM/DD/YYYY. Invalid calendar dates are skipped.
    """
    found: list[tuple[int, str]] = []
    for m in _ISO_DATE_RE.finditer(text):
        iso = _safe_iso(int(m.group(1)), int(m.group(2)), int(m.group(3)))
        if iso:
            found.append((m.start(), iso))
    for m in _MDY_RE.finditer(text):
        month = _MONTHS[m.group(1).lower()]
        iso = _safe_iso(int(m.group(3)), month, int(m.group(2)))
        if iso:
            found.append((m.start(), iso))
    for m in _SLASH_RE.finditer(text):
        iso = _safe_iso(int(m.group(3)), int(m.group(1)), int(m.group(2)))
        if iso:
            found.append((m.start(), iso))
    found.sort(key=lambda pair: pair[0])
    out: list[str] = []
    for _, iso in found:
        if iso not in out:
            out.append(iso)
    return out
