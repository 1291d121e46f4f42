"""End-to-end scenario tests for the subtlest per-tag behaviors.

These drive answer_query with scripted backends and then inspect the exact
requests the model saw, pinning prompt-level contracts that unit tests on
individual modules cannot observe.
"""
from __future__ import annotations

import re

from memflow import (LlmGateway, PipelineConfig, ScriptedBackend, answer_query,
                     build_index, build_store, chunk_history, count_occurrences)


def _prepare(raw):
    store = build_store(raw)
    return store, build_index(chunk_history(store.history, 3))


class TestConflictScenario:
    def test_outdated_marking_and_newest_last_in_prompt(self):
        store, index = _prepare([
            {"session_id": "s1", "timestamp": "2023-01-10", "turns": [
                {"role": "user", "text": "Started my job at Acme Corp as an analyst."}]},
            {"session_id": "s2", "timestamp": "2023-09-05", "turns": [
                {"role": "user", "text": "Big news: my job is now at Bolt Industries."}]},
        ])
        backend = ScriptedBackend([("Question:", "Bolt Industries")])
        gw = LlmGateway(backend=backend)
        result = answer_query("What is my current job?", store, index,
                              PipelineConfig(), gw)
        assert result.action_tag == "conflict-resolution"
        assert result.decided_by == "rule"
        prompt = backend.requests[0].user_message
        acme, bolt = prompt.index("Acme"), prompt.index("Bolt")
        assert acme < bolt  # most recent entries appear last
        assert "[OUTDATED]" in prompt[:bolt]
        assert "[OUTDATED]" not in prompt[bolt:]


class TestPeerConversationScenario:
    def test_third_party_fact_reachable_with_override(self):
        filler = [
            {"session_id": f"f{i}", "timestamp": f"2023-02-{i + 1:02d}", "turns": [
                {"role": "Alice", "text": f"Filler chat about errand number {i}."},
                {"role": "Bob", "text": f"More filler about groceries {i}."}]}
            for i in range(10)
        ]
        key = [{"session_id": "key", "timestamp": "2023-03-01", "turns": [
            {"role": "Alice",
             "text": "I talked to Caroline and she mentioned she works as a nurse now."},
            {"role": "Bob", "text": "Good for Caroline!"}]}]
        store, index = _prepare(filler + key)
        backend = ScriptedBackend([("Question:", "Caroline works as a nurse.")])
        gw = LlmGateway(backend=backend)
        config = PipelineConfig(store_flavor="peer-conversation")
        result = answer_query("What does Caroline do for work?", store, index,
                              config, gw)
        answer_req = next(r for r in backend.requests
                          if "Question:" in r.user_message)
        assert answer_req.system_prompt.startswith("The context is a dialogue")
        # the Caroline name anchor pulls the narrative-speech chunk in
        assert "nurse" in answer_req.user_message
        assert result.answer == "Caroline works as a nurse."


class TestCountingScenario:
    def test_count_tool_runs_over_packed_text_only(self):
        store, index = _prepare([
            {"session_id": f"h{i}", "timestamp": f"2023-04-{i + 1:02d}", "turns": [
                {"role": "user",
                 "text": f"Went hiking on trail number {i} and loved it."}]}
            for i in range(4)
        ])
        backend = ScriptedBackend([
            ("TOOL_RESULT:", "Based on the count you mentioned hiking that many times."),
            ("Question:", "TOOL: count_occurrences | hiking"),
        ])
        gw = LlmGateway(backend=backend)
        result = answer_query("How many hiking trips did I mention?", store,
                              index, PipelineConfig(), gw)
        assert result.action_tag == "broad-summarization"
        continuation = next(r for r in backend.requests
                            if "TOOL_RESULT:" in r.user_message)
        reported = re.search(r"TOOL_RESULT: (\d+)", continuation.user_message).group(1)
        # the tool saw the packed context alone, never the question text
        packed_text = continuation.user_message.split("\n\nQuestion:")[0]
        assert reported == count_occurrences("hiking", packed_text)
        assert result.stage_traces["tools"].invoked is True
        assert result.answer.startswith("Based on the count")
