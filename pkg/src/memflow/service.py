"""HTTP surface: /ingest, /query, /health.

Queries run concurrently against an immutable (store, index) snapshot;
ingest swaps in a fresh snapshot under an exclusive lock, during which
queries get 503.
"""
from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import BadTimestamp, MalformedRecord
from .gateway import LlmGateway
from .pipeline import PipelineConfig, answer_query
from .retrieval import build_index
from .store import (STORE_VERSION, MemoryStore, build_store, chunk_history)


class ServiceState:
    def __init__(self, config: PipelineConfig, gateway: LlmGateway,
                 store: MemoryStore | None = None, embedder=None,
                 turns_per_chunk: int = 3):
        self.config = config
        self.gateway = gateway
        self.embedder = embedder
        self.turns_per_chunk = turns_per_chunk
        self._lock = threading.Lock()
        self.reindexing = False
        self.store = store
        self.index = None
        if store is not None:
            self.index = self._build_index(store)

    def _build_index(self, store: MemoryStore):
        chunks = chunk_history(store.history, self.turns_per_chunk)
        return build_index(chunks, self.embedder, self.config.retrieval)

    def snapshot(self):
        return self.store, self.index

    def ingest(self, records, source_label: str = ""):
        with self._lock:
            self.reindexing = True
            try:
                store = build_store(records, source_label=source_label)
                index = self._build_index(store)
                self.store, self.index = store, index
            finally:
                self.reindexing = False
        return len(store.history.sessions)


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="memflow")

    @app.get("/health")
    def health():
        return {"status": "ok", "store_version": STORE_VERSION}

    @app.post("/ingest")
    async def ingest(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "invalid JSON body"}, status_code=400)
        if isinstance(body, dict):
            records = body.get("sessions")
            source_label = str(body.get("source_label", ""))
        else:
            records, source_label = body, ""
        if not isinstance(records, list):
            return JSONResponse({"error": "expected a list of session records"},
                                status_code=400)
        try:
            count = state.ingest(records, source_label)
        except (MalformedRecord, BadTimestamp) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {"ingested_sessions": count}

    @app.post("/query")
    async def query(request: Request):
        if state.reindexing:
            return JSONResponse({"error": "reindex in progress"}, status_code=503)
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "invalid JSON body"}, status_code=400)
        if not isinstance(body, dict) or not isinstance(body.get("query"), str):
            return JSONResponse({"error": 'expected {"query": "..."}'}, status_code=400)
        store, index = state.snapshot()
        if store is None or index is None:
            return JSONResponse({"error": "no store ingested"}, status_code=503)
        result = answer_query(body["query"], store, index, state.config, state.gateway)
        return result.to_dict()

    return app


def serve(state: ServiceState, host: str = "127.0.0.1", port: int = 8080):
    import uvicorn

    uvicorn.run(create_app(state), host=host, port=port)
