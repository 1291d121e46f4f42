"""Benchmark loaders, the optional answer judge, and the evaluation runner.

Output is one EvalRecord JSON object per line with sorted keys, so runs with
deterministic backends produce byte-identical files. The judge is optional;
when its endpoint fails, a token-overlap recall check (threshold 0.5) decides
and the record is flagged gpt4o_fallback.
"""
from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError, UnknownFormat
from .gateway import ChatRequest, LlmGateway
from .pipeline import PipelineConfig, PipelineResult, answer_query, trace_summary
from .retrieval import build_index
from .store import (ConversationHistory, MemoryStore, chunk_history,
                    compile_profile, ingest_history)
from .textutil import content_tokens, tokenize

JUDGE_SYSTEM_PROMPT = ("You are an expert judge evaluating question-answering "
                       "accuracy. Be lenient on phrasing but strict on factual "
                       "correctness.")
JUDGE_USER_TEMPLATE = (
    "Question: {question}\n"
    "Gold Answer: {gold}\n"
    "Predicted Answer: {predicted}\n\n"
    "Is the predicted answer correct or semantically equivalent to the gold answer?\n"
    "Accept partial matches if the key information is present.\n"
    'Reply ONLY with JSON: {{"correct": true}} or {{"correct": false}}'
)
JUDGE_FALLBACK_RECALL = 0.5
_JSON_RE = re.compile(r"\{.*?\}", re.S)


@dataclass
class BenchItem:
    question_id: str
    question: str
    gold_answer: str
    question_type: str = ""
    history_key: str = ""


@dataclass
class EvalRecord:
    question_id: str
    predicted: str
    action_tag: str | None = None
    decided_by: str | None = None
    is_escalated: bool = False
    stage_tokens: dict = field(default_factory=dict)
    judge_verdict: bool | None = None
    gpt4o_fallback: bool = False
    question_type: str = ""
    error: str | None = None

    def to_json_line(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json_line(cls, line: str) -> "EvalRecord":
        return cls(**json.loads(line))


def _generic_items(data) -> tuple[list[BenchItem], dict[str, ConversationHistory]]:
    if isinstance(data, dict) and "items" in data:
        data = data["items"]
    if not isinstance(data, list):
        raise SchemaError("generic benchmark must be a list of items")
    items: list[BenchItem] = []
    histories: dict[str, ConversationHistory] = {}
    for i, rec in enumerate(data):
        for key in ("question_id", "question", "answer", "sessions"):
            if key not in rec:
                raise SchemaError(f"item {i} missing field {key!r}")
        qid = str(rec["question_id"])
        items.append(BenchItem(
            question_id=qid,
            question=rec["question"],
            gold_answer=str(rec["answer"]),
            question_type=str(rec.get("question_type", "")),
            history_key=qid,
        ))
        histories[qid] = ingest_history(rec["sessions"], source_label="generic")
    return items, histories


def _longmemeval_items(data) -> tuple[list[BenchItem], dict[str, ConversationHistory]]:
    items: list[BenchItem] = []
    histories: dict[str, ConversationHistory] = {}
    for i, rec in enumerate(data):
        for key in ("question_id", "question", "answer", "haystack_sessions"):
            if key not in rec:
                raise SchemaError(f"item {i} missing field {key!r}")
        qid = str(rec["question_id"])
        session_ids = rec.get("haystack_session_ids") or [
            f"{qid}-s{j}" for j in range(len(rec["haystack_sessions"]))]
        dates = rec.get("haystack_dates") or ["1970-01-01"] * len(session_ids)
        raw_sessions = []
        for sid, ts, turns in zip(session_ids, dates, rec["haystack_sessions"]):
            raw_sessions.append({
                "session_id": sid,
                "timestamp": ts,
                "turns": [{"role": t.get("role", "user"),
                           "text": t.get("content", t.get("text", ""))}
                          for t in turns],
            })
        items.append(BenchItem(
            question_id=qid,
            question=rec["question"],
            gold_answer=str(rec["answer"]),
            question_type=str(rec.get("question_type", "")),
            history_key=qid,
        ))
        histories[qid] = ingest_history(raw_sessions, source_label="longmemeval")
    return items, histories


def _locomo_items(data) -> tuple[list[BenchItem], dict[str, ConversationHistory]]:
    items: list[BenchItem] = []
    histories: dict[str, ConversationHistory] = {}
    for i, sample in enumerate(data):
        conv = sample.get("conversation")
        if conv is None or "qa" not in sample:
            raise SchemaError(f"sample {i} missing conversation or qa")
        sample_id = str(sample.get("sample_id", f"sample-{i}"))
        raw_sessions = []
        for key in sorted(conv):
            if not re.fullmatch(r"session_\d+", key):
                continue
            ts = conv.get(f"{key}_date_time") or conv.get(f"{key}_timestamp") or "1970-01-01"
            turns = [{"role": t.get("speaker", "user"),
                      "text": t.get("text", t.get("clean_text", ""))}
                     for t in conv[key]]
            raw_sessions.append({"session_id": f"{sample_id}:{key}",
                                 "timestamp": ts, "turns": turns})
        histories[sample_id] = ingest_history(raw_sessions, source_label="locomo")
        for j, qa in enumerate(sample["qa"]):
            gold = qa.get("answer", qa.get("adversarial_answer"))
            if gold is None:
                raise SchemaError(f"sample {i} qa {j} has no answer field")
            items.append(BenchItem(
                question_id=f"{sample_id}:q{j}",
                question=qa["question"],
                gold_answer=str(gold),
                question_type=str(qa.get("category", "")),
                history_key=sample_id,
            ))
    return items, histories


def _longbench_items(lines) -> tuple[list[BenchItem], dict[str, ConversationHistory]]:
    items: list[BenchItem] = []
    histories: dict[str, ConversationHistory] = {}
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("input", "context", "answers"):
            if key not in rec:
                raise SchemaError(f"line {i + 1} missing field {key!r}")
        qid = str(rec.get("_id", f"item-{i}"))
        paragraphs = [p.strip() for p in rec["context"].split("\n\n") if p.strip()]
        raw_sessions = [{
            "session_id": f"{qid}-doc",
            "timestamp": "1970-01-01",
            "turns": [{"role": "document", "text": p} for p in paragraphs],
        }]
        gold = rec["answers"][0] if rec["answers"] else ""
        items.append(BenchItem(
            question_id=qid,
            question=rec["input"],
            gold_answer=str(gold),
            question_type=str(rec.get("dataset", "")),
            history_key=qid,
        ))
        histories[qid] = ingest_history(raw_sessions, source_label="longbench")
    return items, histories


def load_benchmark(path, fmt: str = "generic",
                   ) -> tuple[list[BenchItem], dict[str, ConversationHistory]]:
    """Load a benchmark file into items plus the histories they query."""
    path = Path(path)
    if fmt == "longbench":
        return _longbench_items(path.read_text(encoding="utf-8").splitlines())
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if fmt == "generic":
        return _generic_items(data)
    if fmt == "longmemeval":
        return _longmemeval_items(data)
    if fmt == "locomo":
        return _locomo_items(data)
    raise UnknownFormat(f"unknown benchmark format {fmt!r}")


def judge(gateway: LlmGateway, question: str, gold: str, predicted: str,
          ) -> tuple[bool, str | None, bool]:
    """Binary correctness via the judge model; overlap recall on failure.

    Returns (correct, raw_judge_text, used_fallback).
    """
    raw: str | None = None
    if gateway is not None and gateway.backend is not None:
        req = ChatRequest(
            system_prompt=JUDGE_SYSTEM_PROMPT,
            user_message=JUDGE_USER_TEMPLATE.format(
                question=question, gold=gold, predicted=predicted),
            max_new_tokens=64,
            temperature=0.0,
        )
        try:
            raw = gateway.complete(req).text
            for block in _JSON_RE.findall(raw):
                try:
                    obj = json.loads(block)
                except json.JSONDecodeError:
                    continue
                if isinstance(obj, dict) and isinstance(obj.get("correct"), bool):
                    return obj["correct"], raw, False
        except Exception:
            pass
    gold_content = content_tokens(gold)
    if not gold_content:
        return False, raw, True
    recall = len(gold_content & set(tokenize(predicted))) / len(gold_content)
    return recall >= JUDGE_FALLBACK_RECALL, raw, True


def run_bench(config: PipelineConfig, items: list[BenchItem],
              histories: dict[str, ConversationHistory], gateway: LlmGateway,
              judge_gateway: LlmGateway | None = None, out_path=None,
              turns_per_chunk: int = 3, embedder=None, workers: int = 1,
              ) -> tuple[list[EvalRecord], dict]:
    """Answer every item, optionally judge, and write deterministic JSONL."""
    prepared: dict[str, tuple[MemoryStore, object]] = {}
    for key, history in histories.items():
        store = MemoryStore(history=history, profile=compile_profile(history))
        index = build_index(chunk_history(history, turns_per_chunk), embedder,
                            config.retrieval)
        prepared[key] = (store, index)

    ordered = sorted(items, key=lambda it: it.question_id)
    results: dict[str, PipelineResult] = {}

    def run_one(item: BenchItem) -> EvalRecord:
        store, index = prepared[item.history_key]
        try:
            result = answer_query(item.question, store, index, config, gateway)
        except Exception as exc:
            return EvalRecord(question_id=item.question_id, predicted="",
                              question_type=item.question_type,
                              error=f"{type(exc).__name__}: {exc}")
        results[item.question_id] = result
        record = EvalRecord(
            question_id=item.question_id,
            predicted=result.answer,
            action_tag=result.action_tag,
            decided_by=result.decided_by,
            is_escalated=result.is_escalated,
            stage_tokens={k: v.to_dict() for k, v in result.stage_traces.items()},
            question_type=item.question_type,
        )
        if judge_gateway is not None:
            correct, _raw, fallback = judge(judge_gateway, item.question,
                                            item.gold_answer, result.answer)
            record.judge_verdict = correct
            record.gpt4o_fallback = fallback
        return record

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_one, ordered))
    else:
        records = [run_one(item) for item in ordered]
    records.sort(key=lambda r: r.question_id)

    summary = dict(trace_summary([results[r.question_id] for r in records
                                  if r.error is None]))
    summary["errors"] = sum(1 for r in records if r.error is not None)
    summary["ablations"] = {name: getattr(config, name)
                            for name in ("uniform_rag", "no_router", "no_tools",
                                         "no_validator", "no_packer",
                                         "no_retrieval_strategy")}
    judged = [r for r in records if r.judge_verdict is not None]
    if judged:
        summary["accuracy"] = sum(r.judge_verdict for r in judged) / len(judged)
    by_type: dict[str, dict] = {}
    for r in records:
        slot = by_type.setdefault(r.question_type or "unlabeled",
                                  {"count": 0, "correct": 0, "judged": 0})
        slot["count"] += 1
        if r.judge_verdict is not None:
            slot["judged"] += 1
            slot["correct"] += int(r.judge_verdict)
    for slot in by_type.values():
        if slot["judged"]:
            slot["accuracy"] = slot["correct"] / slot["judged"]
    summary["per_type"] = by_type

    if out_path is not None:
        lines = [r.to_json_line() for r in records]
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return records, summary
