from __future__ import annotations

import pytest

from memflow import (LlmGateway, MemoryStore, ScriptedBackend, build_index,
                     build_store, chunk_history)


@pytest.fixture
def raw_sessions():
    return [
        {"session_id": "s1", "timestamp": "2023-03-01", "turns": [
            {"role": "user", "text": "I ran my first marathon today and finished in four hours."},
            {"role": "assistant", "text": "Congratulations on the marathon!"},
            {"role": "user", "text": "I prefer vegetarian food."},
        ]},
        {"session_id": "s2", "timestamp": "2023-03-22", "turns": [
            {"role": "user", "text": "My knee surgery went well this morning."},
            {"role": "assistant", "text": "Glad the surgery went well."},
            {"role": "user", "text": "I live in Austin."},
        ]},
        {"session_id": "s3", "timestamp": "2023-05-10", "turns": [
            {"role": "user", "text": "I started hiking every weekend. Hiking clears my head."},
            {"role": "assistant", "text": "Hiking is great exercise."},
            {"role": "user", "text": "My new job at Orchard Analytics starts Monday."},
        ]},
    ]


@pytest.fixture
def store(raw_sessions) -> MemoryStore:
    return build_store(raw_sessions)


@pytest.fixture
def index(store):
    return build_index(chunk_history(store.history, 3))


def scripted_gateway(rules) -> LlmGateway:
    return LlmGateway(backend=ScriptedBackend(rules))


@pytest.fixture
def gateway_factory():
    return scripted_gateway
