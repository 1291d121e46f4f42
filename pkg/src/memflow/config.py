"""Flat key=value config files and the objects built from them.

Reference keys (all optional):

    endpoint            = http://localhost:8000      # chat backend base URL
    model               = qwen3-1.7b
    timeout             = 60
    retries             = 2
    counter_mode        = approximate | external
    tokenize_endpoint   = http://localhost:8000/tokenize
    embed_endpoint      = http://localhost:8000      # dense encoder service
    embed_model         = bge-small-en-v1.5
    embed_dim           = 384
    store_flavor        = chat | document | peer-conversation
    turns_per_chunk     = 3
    ablations           = no_tools,uniform_rag
    tau_ground          = 0.07
    passthrough_words   = 6
    answer_max_new_tokens = 256
    prompt_dir          = /path/to/prompt/overrides
    budget.global_ceiling = 20480
    budget.<tag>.tier2_tokens = 6000
    budget.<tag>.word_cap     = 300 | none
    retrieval.k1 / retrieval.b / retrieval.rrf_k / retrieval.base_top_k
    retrieval.tier2_top_k / retrieval.tier2_doc_top_k
    retrieval.tier3_top_k / retrieval.tier3_broad_top_k
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .gateway import HttpChatBackend, LlmGateway, ScriptedBackend, TokenCounter
from .packer import PackBudget, TagBudget
from .pipeline import ABLATION_NAMES, PipelineConfig
from .retrieval import RetrievalParams
from .router import ActionTag


def load_config_file(path) -> dict[str, str]:
    """Parse "key = value" lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key = value): {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _parse_budget(cfg: dict[str, str]) -> PackBudget:
    budget = PackBudget()
    if "budget.global_ceiling" in cfg:
        budget.global_ceiling = int(cfg["budget.global_ceiling"])
    for tag in ActionTag:
        tier_key = f"budget.{tag.value}.tier2_tokens"
        cap_key = f"budget.{tag.value}.word_cap"
        current = budget.per_tag[tag]
        tier2 = int(cfg[tier_key]) if tier_key in cfg else current.tier2_tokens
        if cap_key in cfg:
            raw = cfg[cap_key].lower()
            cap = None if raw in ("none", "n/a", "-") else int(raw)
        else:
            cap = current.word_cap
        budget.per_tag[tag] = TagBudget(tier2, cap)
    return budget


def _parse_retrieval(cfg: dict[str, str]) -> RetrievalParams:
    kwargs = {}
    for f in dataclasses.fields(RetrievalParams):
        key = f"retrieval.{f.name}"
        if key in cfg:
            parse = float if f.name in ("k1", "b") else int
            kwargs[f.name] = parse(cfg[key])
    return RetrievalParams(**kwargs)


def build_pipeline_config(cfg: dict[str, str],
                          ablations: str | None = None) -> PipelineConfig:
    names = []
    for source in (cfg.get("ablations", ""), ablations or ""):
        names.extend(n.strip() for n in source.split(",") if n.strip())
    toggles = {}
    for name in names:
        if name not in ABLATION_NAMES:
            raise ValueError(f"unknown ablation {name!r}")
        toggles[name] = True
    return PipelineConfig(
        **toggles,
        budget=_parse_budget(cfg),
        retrieval=_parse_retrieval(cfg),
        store_flavor=cfg.get("store_flavor", "chat"),
        answer_max_new_tokens=int(cfg.get("answer_max_new_tokens", "256")),
        tau_ground=float(cfg.get("tau_ground", "0.07")),
        passthrough_max_words=int(cfg.get("passthrough_words", "6")),
        prompt_dir=cfg.get("prompt_dir"),
    )


def build_gateway(cfg: dict[str, str], backend_arg: str | None = None) -> LlmGateway:
    """Backend spec: a URL, "scripted:<path>", or "none" (deterministic layers only)."""
    counter = TokenCounter(
        mode=cfg.get("counter_mode", "approximate"),
        external_endpoint=cfg.get("tokenize_endpoint"),
    )
    spec = backend_arg or cfg.get("endpoint", "none")
    if spec == "none":
        backend = None
    elif spec.startswith("scripted:"):
        backend = ScriptedBackend.from_file(spec.split(":", 1)[1])
    else:
        backend = HttpChatBackend(
            endpoint=spec,
            model=cfg.get("model", "default"),
            timeout=float(cfg.get("timeout", "60")),
        )
    return LlmGateway(backend=backend, counter=counter,
                      retries=int(cfg.get("retries", "2")))


def build_embedder(cfg: dict[str, str]):
    from .retrieval import HashingEmbedder, HttpEmbedder

    if cfg.get("embed_endpoint"):
        return HttpEmbedder(
            endpoint=cfg["embed_endpoint"],
            model=cfg.get("embed_model", "default"),
            dim=int(cfg.get("embed_dim", "384")),
        )
    return HashingEmbedder(dim=int(cfg.get("embed_dim", "384")))
