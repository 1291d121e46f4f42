"""Command line entry points: ingest, query, bench, serve."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import load_benchmark, run_bench
from .config import (build_embedder, build_gateway, build_pipeline_config,
                     load_config_file)
from .pipeline import answer_query
from .retrieval import build_index
from .store import build_store, chunk_history, load_store, save_store


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--backend", help="chat backend URL, scripted:<path>, or none")
    parser.add_argument("--ablation", help="comma-separated ablation toggles")


def _setup(args) -> tuple[dict, object, object]:
    cfg = load_config_file(args.config) if args.config else {}
    config = build_pipeline_config(cfg, getattr(args, "ablation", None))
    gateway = build_gateway(cfg, getattr(args, "backend", None))
    return cfg, config, gateway


def cmd_ingest(args) -> int:
    records = json.loads(Path(args.input).read_text(encoding="utf-8"))
    if isinstance(records, dict):
        records = records.get("sessions", [])
    store = build_store(records, source_label=args.source_label)
    save_store(store, args.store)
    print(json.dumps({"sessions": len(store.history.sessions),
                      "profile_facts": len(store.profile.facts),
                      "store": args.store}))
    return 0


def cmd_query(args) -> int:
    cfg, config, gateway = _setup(args)
    store = load_store(args.store)
    chunks = chunk_history(store.history, int(cfg.get("turns_per_chunk", "3")))
    index = build_index(chunks, build_embedder(cfg), config.retrieval)
    result = answer_query(args.question, store, index, config, gateway)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg, config, gateway = _setup(args)
    items, histories = load_benchmark(args.benchmark, args.format)
    judge_gateway = None
    if args.judge_backend:
        judge_gateway = build_gateway(cfg, args.judge_backend)
    _, summary = run_bench(
        config, items, histories, gateway,
        judge_gateway=judge_gateway,
        out_path=args.out,
        turns_per_chunk=int(cfg.get("turns_per_chunk", "3")),
        embedder=build_embedder(cfg),
        workers=args.workers,
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceState, serve

    cfg, config, gateway = _setup(args)
    store = load_store(args.store) if args.store and Path(args.store).exists() else None
    state = ServiceState(config, gateway, store=store, embedder=build_embedder(cfg),
                         turns_per_chunk=int(cfg.get("turns_per_chunk", "3")))
    serve(state, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="memflow",
                                     description="Memory orchestration pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest session records into a store file")
    p.add_argument("--input", required=True, help="JSON session records")
    p.add_argument("--store", required=True, help="output store path")
    p.add_argument("--source-label", default="")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="answer one question against a store")
    p.add_argument("question")
    p.add_argument("--store", required=True)
    _common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="run a benchmark file")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--format", default="generic",
                   choices=["generic", "longmemeval", "locomo", "longbench"])
    p.add_argument("--out", help="output JSONL path")
    p.add_argument("--judge-backend", help="judge endpoint or scripted:<path>")
    p.add_argument("--workers", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--store")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    _common(p)
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
