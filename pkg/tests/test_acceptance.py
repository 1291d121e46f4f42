"""Acceptance suite: one test class per criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report lines. Everything here is offline and deterministic except the
explicitly optional live check at the end, which is skipped unless
MEMFLOW_LIVE_ENDPOINT is set.
"""
from __future__ import annotations

import json
import math
import os
import random
import time
from datetime import date, datetime, timezone

import pytest

from memflow import (ABSTENTION, ActionTag, LlmGateway, PackBudget,
                     PipelineConfig, ScriptedBackend, TokenCounter,
                     answer_query, apply_rules, bm25_rank, build_index,
                     build_store, chunk_history, days_between, escalation_target,
                     months_between, pack, parse_tool_call, rrf_fuse, validate,
                     weeks_between, generate, render_prompt)
from memflow.bench import EvalRecord, load_benchmark, run_bench
from memflow.errors import PinnedOverflow
from memflow.packer import TagBudget
from memflow.retrieval import ScoredChunk
from memflow.store import Chunk
from memflow.tiers import AnnotatedChunk, EvidenceBundle, SummaryEntry
from memflow.tools import TOOL_ARITY, execute_tool
from memflow.validator import ESCALATION_MAP, RETRY_CAP


def report(n: int, text: str):
    print(f"\nACCEPTANCE {n}: PASS - {text}")


COUNTER = TokenCounter()


# --- criterion 1: rule-layer disambiguation ----------------------------

class TestCriterion1RuleRouting:
    EXAMPLES = [
        ("How many days passed between my two dentist visits?",
         ActionTag.TEMPORAL_REASONING),
        ("How long was I in Japan?", ActionTag.TARGETED_EXTRACTION),
        ("What is my current job?", ActionTag.CONFLICT_RESOLUTION),
        ("How many magazine subscriptions do I have?", ActionTag.BROAD_SUMMARIZATION),
        ("What should I do when a customer complains?", ActionTag.CONSTRAINT_VALIDATION),
        ("Any tips for keeping my kitchen clean?", ActionTag.PROFILE_INJECTION),
    ]

    def test_six_disambiguation_examples_under_one_second(self):
        started = time.perf_counter()
        for query, expected in self.EXAMPLES:
            assert apply_rules(query) is expected, query
        elapsed = time.perf_counter() - started
        assert elapsed < 1.0
        report(1, f"all 6 disambiguation examples rule-routed in {elapsed * 1000:.1f} ms")


# --- criterion 2: escalation policy ------------------------------------

class TestCriterion2Escalation:
    TABLE = {
        ActionTag.PROFILE_INJECTION: ActionTag.TARGETED_EXTRACTION,
        ActionTag.TARGETED_EXTRACTION: ActionTag.CONFLICT_RESOLUTION,
        ActionTag.TEMPORAL_REASONING: ActionTag.TARGETED_EXTRACTION,
        ActionTag.CONFLICT_RESOLUTION: ActionTag.TARGETED_EXTRACTION,
        ActionTag.BROAD_SUMMARIZATION: ActionTag.TARGETED_EXTRACTION,
        ActionTag.CONSTRAINT_VALIDATION: ActionTag.TARGETED_EXTRACTION,
        ActionTag.STATE_TRACKING: ActionTag.CONFLICT_RESOLUTION,
    }

    def test_policy_table_and_retry_bound(self):
        assert dict(ESCALATION_MAP) == self.TABLE
        for tag, target in self.TABLE.items():
            assert escalation_target(tag) is target
        assert RETRY_CAP == 1

        raw = [{"session_id": "s1", "timestamp": "2023-01-01", "turns": [
            {"role": "user", "text": "We talked about the garden project."},
            {"role": "assistant", "text": "The garden project sounds nice."},
        ]}]
        store = build_store(raw)
        index = build_index(chunk_history(store.history, 3))
        backend = ScriptedBackend([("", "ESCALATE_REQUIRED")])
        gw = LlmGateway(backend=backend)
        result = answer_query("What colour did we paint the fence last autumn?",
                              store, index, PipelineConfig(no_router=True), gw)
        assert result.answer == ABSTENTION
        assert result.escalation_triggered is True
        assert result.is_escalated is False
        # exactly one retry: original answer call + escalation answer call
        assert result.stage_traces["escalation_answer"].invoked is True
        assert result.slm_call_count == 2
        report(2, "table 7/7 exact, retry bound 1, literal abstention returned")


# --- criterion 3: packer fuzz ------------------------------------------

def _rand_chunk(rng, i):
    n_words = rng.randrange(1, 700)
    text = " ".join(f"c{i}w{j}" for j in range(n_words))
    ts = None
    if rng.random() < 0.8:
        ts = datetime(2023, rng.randrange(1, 13), rng.randrange(1, 28),
                      tzinfo=timezone.utc)
    chunk = Chunk(chunk_id=f"s{rng.randrange(4)}:{i:03d}", session_id="s",
                  session_timestamp=ts, text=text,
                  turn_span=(i, i))
    return AnnotatedChunk(chunk=chunk, score=rng.random(),
                          stale_flag=rng.random() < 0.1,
                          section_header="Session s (2023-01-01)" if rng.random() < 0.2 else "")


class TestCriterion3PackerFuzz:
    def test_thousand_random_bundles(self):
        rng = random.Random(20480)
        budget = PackBudget()
        tags = list(ActionTag)
        overflow_count = 0
        for trial in range(1000):
            tag = tags[rng.randrange(len(tags))]
            pinned = ""
            if rng.random() < 0.4:
                pinned = " ".join(f"p{j}" for j in range(rng.randrange(1, 300)))
            summaries = [SummaryEntry(" ".join(f"s{i}x{j}" for j in range(rng.randrange(1, 300))),
                                      rng.random())
                         for i in range(rng.randrange(0, 5))]
            episodic = []
            seen_ids: set[str] = set()
            for i in range(rng.randrange(0, 25)):
                cand = _rand_chunk(rng, i)
                if cand.chunk_id not in seen_ids:
                    seen_ids.add(cand.chunk_id)
                    episodic.append(cand)
            bundle = EvidenceBundle(tag=tag, pinned=pinned, summaries=summaries,
                                    episodic=episodic,
                                    preserve_order=rng.random() < 0.3,
                                    select_by_position=rng.random() < 0.2)
            try:
                packed = pack(bundle, budget, COUNTER, query="what happened",
                              embedder=None)
            except PinnedOverflow:
                overflow_count += 1
                continue
            assert packed.total_tokens <= budget.global_ceiling, f"trial {trial}"
            if pinned:
                assert pinned in packed.text, f"trial {trial}: pinned lost"
        report(3, f"1000 bundles within the 20480 ceiling "
                  f"({overflow_count} pinned-overflow signals), pinned verbatim")

    def test_budget_table_all_rows(self):
        budget = PackBudget()
        expected = {
            ActionTag.PROFILE_INJECTION: TagBudget(0, None),
            ActionTag.TARGETED_EXTRACTION: TagBudget(6000, 300),
            ActionTag.TEMPORAL_REASONING: TagBudget(4400, None),
            ActionTag.CONFLICT_RESOLUTION: TagBudget(6000, None),
            ActionTag.BROAD_SUMMARIZATION: TagBudget(8000, None),
            ActionTag.CONSTRAINT_VALIDATION: TagBudget(6000, 200),
            ActionTag.STATE_TRACKING: TagBudget(6000, 150),
        }
        assert budget.per_tag == expected
        assert budget.global_ceiling == 20480


# --- criterion 4: BM25 + RRF oracle equivalence ------------------------

def _bm25_oracle(doc_tokens: dict[str, list[str]], query_terms: list[str],
                 k1=1.5, b=0.75):
    n = len(doc_tokens)
    avgdl = sum(len(v) for v in doc_tokens.values()) / n
    scores: dict[str, float] = {}
    for term in dict.fromkeys(query_terms):
        df = sum(1 for v in doc_tokens.values() if term in v)
        if df == 0:
            continue
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        for d, v in doc_tokens.items():
            tf = v.count(term)
            if tf == 0:
                continue
            scores[d] = scores.get(d, 0.0) + idf * tf * (k1 + 1) / (
                tf + k1 * (1 - b + b * len(v) / avgdl))
    return sorted(((d, s) for d, s in scores.items() if s > 0),
                  key=lambda kv: (-kv[1], kv[0]))


def _rrf_oracle(rankings: list[list[str]], k=60):
    scores: dict[str, float] = {}
    for ranking in rankings:
        for rank, doc in enumerate(ranking, start=1):
            scores[doc] = scores.get(doc, 0.0) + 1.0 / (k + rank)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


class TestCriterion4Oracles:
    def test_bm25_and_rrf_match_brute_force(self):
        vocab = ["ant", "bee", "cat", "dog", "elk", "fox"]
        rng = random.Random(60)
        corpora = 0
        queries_checked = 0
        for n_docs in range(1, 6):
            for n_vocab in range(1, 7):
                terms = vocab[:n_vocab]
                for _ in range(6):  # several tf patterns per shape
                    docs = {}
                    for d in range(n_docs):
                        length = rng.randrange(1, 9)
                        docs[f"s:{d}"] = " ".join(rng.choice(terms)
                                                  for _ in range(length))
                    corpora += 1
                    chunks = [Chunk(chunk_id=cid, session_id="s",
                                    session_timestamp=None, text=text,
                                    turn_span=(0, 0))
                              for cid, text in sorted(docs.items())]
                    index = build_index(chunks)
                    doc_tokens = {cid: text.split() for cid, text in docs.items()}
                    query_pool = [[t] for t in terms]
                    query_pool += [rng.sample(terms, min(len(terms), 2)),
                                   rng.sample(terms, min(len(terms), 3))]
                    for q_terms in query_pool:
                        queries_checked += 1
                        got = bm25_rank(index, " ".join(q_terms))
                        want = _bm25_oracle(doc_tokens, q_terms)
                        assert [(g.chunk_id) for g in got] == [d for d, _ in want]
                        for g, (_, s) in zip(got, want):
                            assert g.score == pytest.approx(s, rel=1e-12)
        # RRF: random ranking families vs direct formula evaluation
        fusions = 0
        for trial in range(300):
            n_lists = rng.randrange(1, 5)
            docs = [f"d{i}" for i in range(rng.randrange(1, 6))]
            rankings = []
            for _ in range(n_lists):
                perm = docs[:]
                rng.shuffle(perm)
                rankings.append(perm[:rng.randrange(1, len(docs) + 1)])
            got = rrf_fuse([[ScoredChunk(d, 0.0) for d in r] for r in rankings], 60)
            want = _rrf_oracle(rankings, 60)
            assert [g.chunk_id for g in got] == [d for d, _ in want]
            for g, (_, s) in zip(got, want):
                assert g.score == pytest.approx(s, rel=1e-12)
            fusions += 1
        report(4, f"BM25 matched on {corpora} corpora / {queries_checked} queries; "
                  f"RRF matched on {fusions} fusions; zero mismatches")


# --- criterion 5: validator cascade ------------------------------------

class TestCriterion5ValidatorCascade:
    def test_cascade_contract(self):
        # stage 1, zero gateway traffic
        for answer in ("", "  ", "ESCALATE_REQUIRED", "escalate_required.",
                       "Escalate Required"):
            gw = LlmGateway(backend=ScriptedBackend([("", "yes")]))
            verdict = validate(answer, "ctx", "q", gw)
            assert verdict.stage == "hard_failure" and not verdict.grounded
            assert gw.call_count == 0

        # stage 2, zero gateway traffic
        for answer in ("5", "21 days"):
            gw = LlmGateway(backend=ScriptedBackend([("", "yes")]))
            verdict = validate(answer, "ctx", "q", gw)
            assert verdict.stage == "passthrough" and verdict.grounded
            assert gw.call_count == 0

        # stage 3: exactly one judge call at max_new_tokens=8
        backend = ScriptedBackend([("", "yes")])
        gw = LlmGateway(backend=backend)
        twenty_words = " ".join(f"w{i}" for i in range(20))
        verdict = validate(twenty_words, "ctx", "q", gw)
        assert verdict.stage == "llm_judge"
        assert gw.call_count == 1
        assert backend.requests[0].max_new_tokens == 8

        # unparseable judge output falls to the tau=0.07 overlap rule
        backend = ScriptedBackend([("", "perhaps")])
        gw = LlmGateway(backend=backend)
        grounded_answer = "the hiking " + " ".join(f"w{i}" for i in range(12))
        verdict = validate(grounded_answer, "we went hiking", "q", gw)
        assert verdict.stage == "overlap_fallback"
        assert verdict.grounded is True  # 1/13 ~ 0.077 >= 0.07
        report(5, "stages 1-2 decide with zero calls, one 8-token judge call, "
                  "overlap fallback at tau=0.07")


# --- criterion 6: tool protocol ----------------------------------------

class TestCriterion6Tools:
    def test_protocol_and_oracle(self):
        # bit-exact parse/execute round-trips for both wire formats
        call = parse_tool_call("TOOL: days_between | 2023-03-01 | 2023-03-22")
        assert call is not None
        result = execute_tool(call, "")
        assert result.value == "21"
        assert result.rendered == "TOOL_RESULT: 21"
        count_call = parse_tool_call("TOOL: count_occurrences | hiking")
        assert execute_tool(count_call, "hiking and more hiking").value == "2"

        assert days_between("2023-03-01", "2023-03-22") == "21"

        # independent calendar oracle, 1000 random pairs
        rng = random.Random(2023)
        lo, hi = date(2008, 1, 1).toordinal(), date(2038, 12, 31).toordinal()
        for _ in range(1000):
            a = date.fromordinal(rng.randint(lo, hi))
            b = date.fromordinal(rng.randint(lo, hi))
            days = abs(a.toordinal() - b.toordinal())
            assert days_between(a.isoformat(), b.isoformat()) == str(days)
            assert weeks_between(a.isoformat(), b.isoformat()) == str(days // 7)
            e, l = sorted((a, b))
            months = 0
            while True:
                total = e.month + months
                y, m = e.year + total // 12, total % 12 + 1
                if (y, m, e.day) <= (l.year, l.month, l.day):
                    months += 1
                else:
                    break
            assert months_between(a.isoformat(), b.isoformat()) == str(months)

        # adversarial always-tool-calling script halts after 3 rounds
        from memflow.packer import PackedContext

        packed = PackedContext("user: context", {"episodic": 2}, 2)
        gw = LlmGateway(backend=ScriptedBackend(
            [("", "TOOL: days_between | 2023-01-01 | 2023-01-02")]))
        req = render_prompt(ActionTag.TEMPORAL_REASONING, packed, "q")
        draft = generate(gw, req, packed, ActionTag.TEMPORAL_REASONING)
        assert draft.tool_rounds_used == 3
        assert gw.call_count == 4

        # unknown names never reach execution
        assert parse_tool_call("TOOL: rm_rf | /") is None
        assert parse_tool_call("TOOL: shell | ls") is None
        assert set(TOOL_ARITY) == {"days_between", "weeks_between",
                                   "months_between", "count_occurrences"}
        report(6, "wire formats round-trip, 1000-pair calendar oracle agreement, "
                  "loop halts at 3 rounds, registry closed")


# --- criteria 7-9: control flow, ablations, trace accounting ------------

def synthetic_benchmark(path, n_items=20):
    """20 synthetic items spread across query styles that hit all tags."""
    questions = [
        ("What did I say about topic{i}?", "recall"),
        ("How many days passed between my marathon and my race{i}?", "temporal"),
        ("What is my current role at client{i}?", "conflict"),
        ("How many souvenirs{i} do I own?", "broad"),
        ("What am I never allowed to do at site{i}?", "constraint"),
        ("How has my routine{i} evolved?", "state"),
        ("Any tips for organizing my shelf{i}?", "profile"),
    ]
    items = []
    for i in range(n_items):
        template, qtype = questions[i % len(questions)]
        items.append({
            "question_id": f"q{i:03d}",
            "question": template.format(i=i),
            "answer": f"gold answer {i}",
            "question_type": qtype,
            "sessions": [
                {"session_id": f"q{i}-s0", "timestamp": "2023-01-05", "turns": [
                    {"role": "user",
                     "text": f"Earlier note on topic{i} and my marathon trip."},
                    {"role": "user", "text": "I prefer tidy shelves."},
                ]},
                {"session_id": f"q{i}-s1", "timestamp": "2023-02-10", "turns": [
                    {"role": "user",
                     "text": f"Later update about race{i}, client{i} and souvenirs{i}."},
                    {"role": "user", "text": f"At site{i} you must never block the exit."},
                ]},
            ],
        })
    path.write_text(json.dumps(items), encoding="utf-8")


def scripted_rules():
    return [
        ("Candidate answer:", "yes"),
        ("TOOL_RESULT", "The combined tool based answer with plenty of words."),
        ("Question:", "A deterministic scripted answer with enough words to judge."),
        ("", '{"requires_rag": true, "requires_reasoning": false, '
             '"action_tag": "targeted-extraction"}'),
    ]


class TotalingBackend:
    """Scripted backend that also logs (request, reply) for token cross-checks."""

    label = "scripted"

    def __init__(self, rules):
        self.inner = ScriptedBackend(rules)
        self.log: list[tuple] = []

    def send(self, req):
        reply = self.inner.send(req)
        self.log.append((req, reply.text))
        return reply


class TestCriterion7ControlFlow:
    RAW = [
        {"session_id": "s1", "timestamp": "2023-03-01", "turns": [
            {"role": "user", "text": "I ran the marathon on a hilly course."},
            {"role": "assistant", "text": "Great result for a marathon."},
        ]},
        {"session_id": "s2", "timestamp": "2023-03-22", "turns": [
            {"role": "user", "text": "Knee surgery recovery is going fine."},
            {"role": "assistant", "text": "Glad recovery is smooth."},
        ]},
    ]

    def _mk(self):
        store = build_store(self.RAW)
        return store, build_index(chunk_history(store.history, 3))

    def test_control_flow(self):
        # short-circuit: zero model calls
        store, index = self._mk()
        gw = LlmGateway(backend=ScriptedBackend([("", "unused")]))
        result = answer_query("surgery recovery fine?", store, index,
                              PipelineConfig(), gw)
        assert result.short_circuited and result.slm_call_count == 0
        assert gw.call_count == 0

        # normal path: at most 4 stage-level calls
        store, index = self._mk()
        gw = LlmGateway(backend=ScriptedBackend(scripted_rules()))
        result = answer_query("Describe the marathon course conditions for me.",
                              store, index, PipelineConfig(), gw)
        stage_calls = sum(int(result.stage_traces[s].invoked) for s in
                          ("router", "answer", "validator", "escalation_answer"))
        assert stage_calls <= 4
        assert not result.short_circuited

        # escalated path: is_escalated set when the retry answer is adopted
        store, index = self._mk()
        gw = LlmGateway(backend=ScriptedBackend([
            ("Question:", "ESCALATE_REQUIRED", True),
            ("Question:", "the hilly course"),
        ]))
        result = answer_query("Describe the marathon course conditions for me.",
                              store, index, PipelineConfig(no_router=True), gw)
        assert result.is_escalated is True
        assert result.answer == "the hilly course"

        # byte-identical results across two fresh runs
        payloads = []
        for _ in range(2):
            store, index = self._mk()
            gw = LlmGateway(backend=ScriptedBackend(scripted_rules()))
            r = answer_query("Describe the marathon course conditions for me.",
                             store, index, PipelineConfig(), gw)
            payloads.append(json.dumps(r.to_dict(), sort_keys=True))
        assert payloads[0] == payloads[1]
        report(7, "short-circuit 0 calls, stage-level calls <= 4, escalation "
                  "flagging exact, byte-identical reruns")


class TestCriterion8Ablations:
    def test_six_configurations_and_neutrality(self, tmp_path):
        bench_path = tmp_path / "synthetic.json"
        synthetic_benchmark(bench_path, 20)
        items, histories = load_benchmark(bench_path, "generic")

        toggles = ("uniform_rag", "no_router", "no_tools", "no_validator",
                   "no_packer", "no_retrieval_strategy")
        for toggle in toggles:
            config = PipelineConfig(**{toggle: True})
            gw = LlmGateway(backend=ScriptedBackend(scripted_rules()))
            out = tmp_path / f"{toggle}.jsonl"
            records, summary = run_bench(config, items, histories, gw, out_path=out)
            assert len(records) == 20
            assert summary["errors"] == 0
            assert summary["ablations"][toggle] is True
            for line in out.read_text().splitlines():
                rec = EvalRecord.from_json_line(line)  # schema-valid round trip
                assert rec.question_id.startswith("q")
                assert set(rec.stage_tokens) == {"router", "answer", "validator",
                                                 "escalation_answer", "tools"}

        # all-false configuration is byte-identical to the default pipeline
        payloads = []
        for config in (PipelineConfig(),
                       PipelineConfig(uniform_rag=False, no_router=False,
                                      no_tools=False, no_validator=False,
                                      no_packer=False,
                                      no_retrieval_strategy=False)):
            gw = LlmGateway(backend=ScriptedBackend(scripted_rules()))
            out = tmp_path / f"neutral-{len(payloads)}.jsonl"
            run_bench(config, items, histories, gw, out_path=out)
            payloads.append(out.read_bytes())
        assert payloads[0] == payloads[1]
        report(8, "6 ablation configs ran 20/20 items with valid records; "
                  "all-false config byte-identical to default")


class TestCriterion9TraceAccounting:
    def test_stage_sums_and_rates(self, tmp_path):
        bench_path = tmp_path / "synthetic.json"
        synthetic_benchmark(bench_path, 20)
        items, histories = load_benchmark(bench_path, "generic")

        from memflow import MemoryStore, compile_profile
        from memflow.pipeline import trace_summary

        results = []
        for item in items:
            history = histories[item.history_key]
            store = MemoryStore(history=history, profile=compile_profile(history))
            index = build_index(chunk_history(history, 3))
            backend = TotalingBackend(scripted_rules())
            gw = LlmGateway(backend=backend)
            result = answer_query(item.question, store, index, PipelineConfig(), gw)
            results.append(result)
            # every model call is attributed to exactly one stage; the
            # fixed-wrapper share of this implementation is zero tokens
            expected_total = 0
            for req, reply in backend.log:
                expected_total += (COUNTER.count_tokens(req.system_prompt)
                                   + COUNTER.count_tokens(req.user_message)
                                   + COUNTER.count_tokens(reply))
            assert result.pipeline_tokens() == expected_total, item.question_id

        summary = trace_summary(results)
        assert summary["escalation_adopted_rate"] <= summary["escalation_triggered_rate"]
        report(9, "per-stage token sums equal gateway totals on all 20 runs; "
                  "adopted rate <= triggered rate")


# --- criterion 10: optional live check ----------------------------------

@pytest.mark.skipif("MEMFLOW_LIVE_ENDPOINT" not in os.environ,
                    reason="live check runs only with MEMFLOW_LIVE_ENDPOINT set "
                           "(documented in README; not CI-gated)")
class TestCriterion10LiveCheck:
    def test_live_pipeline_plumbing(self, tmp_path):
        from memflow.config import build_gateway

        endpoint = os.environ["MEMFLOW_LIVE_ENDPOINT"]
        cfg = {"endpoint": endpoint, "model": os.environ.get("MEMFLOW_LIVE_MODEL",
                                                             "default")}
        if "MEMFLOW_TOKENIZE_ENDPOINT" in os.environ:
            cfg["counter_mode"] = "external"
            cfg["tokenize_endpoint"] = os.environ["MEMFLOW_TOKENIZE_ENDPOINT"]
        gateway = build_gateway(cfg)
        bench_path = tmp_path / "slice.json"
        synthetic_benchmark(bench_path, 25)
        items, histories = load_benchmark(bench_path, "generic")
        records, summary = run_bench(PipelineConfig(), items, histories, gateway)
        assert summary["errors"] == 0
        # plumbing check, not accuracy: packed context within an order of
        # magnitude of the reported 1,543-token mean under an exact counter
        assert 150 <= summary["mean_packed_tokens"] <= 15430
        report(10, f"live run completed; mean packed tokens "
                   f"{summary['mean_packed_tokens']:.0f}")
