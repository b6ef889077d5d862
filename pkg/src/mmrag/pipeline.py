"""Per-query pipeline stages over plain JSON records.

Each stage takes the record produced by the previous stage and returns a copy
with its own fields added, so the JSONL written between CLI commands is the
full provenance of an answer:

- ``retrieve_record`` adds ``refined_query``, ``retrieved`` (ranked sections)
- ``rerank_record`` adds ``stage1``, ``stage2``, ``context``, ``rerank_degraded``
- ``answer_record`` adds ``predicted_answer``, ``route``, ``context_section_id``
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Mapping

from .fusion import FusionConfig, build_query_vector
from .gateway import Gateway, GatewayError, TemplateId
from .index import ScoredCandidate, VectorIndex
from .inspector import decide_and_route
from .refiner import parse_refiner_output
from .rerank import FusionWeights, RerankedContext, stage1_rerank, stage2_article_rerank


def section_key(article_id: str, section_id: str) -> str:
    """Identity used for section-level gold labels, e.g. ``A0007/s2``."""
    return f"{article_id}/{section_id}"


def refine_question(gateway: Gateway, question: str) -> tuple[str, bool]:
    """Ask the refiner for a rewritten query; fall back to the question if it is unusable.

    The refiner prompt already opens the ``<think>`` block, so a response that
    does not repeat the tag is completed with it before parsing.
    """
    try:
        raw = gateway.complete(TemplateId.REFINER, {"Query": question})
    except GatewayError:
        return question, False
    if not raw.lstrip().startswith("<think>"):
        raw = "<think>" + raw
    out = parse_refiner_output(raw)
    if out.well_formed:
        return out.refined_query, True
    return question, False


@dataclass
class Retriever:
    """Query encoder plus index; embeddings are cached so alpha sweeps only re-fuse."""

    index: VectorIndex
    gateway: Gateway
    fusion: FusionConfig
    _cache: dict = field(default_factory=dict, repr=False)

    def embeddings(self, text: str, image_ref: str):
        key = (text, image_ref)
        if key not in self._cache:
            self._cache[key] = (self.gateway.embed_image(image_ref), self.gateway.embed_text(text))
        return self._cache[key]

    def search(self, text: str, image_ref: str, k: int, alpha: float | None = None) -> list[ScoredCandidate]:
        cfg = self.fusion if alpha is None else replace(self.fusion, alpha=alpha)
        img, txt = self.embeddings(text, image_ref)
        return self.index.search_topk(build_query_vector(img, txt, cfg), k)


def _ms(start: float) -> float:
    return round((time.perf_counter() - start) * 1000.0, 3)


def retrieve_record(query: Mapping, retriever: Retriever, k: int, refine: bool = True,
                    alpha: float | None = None, timing: bool = False) -> dict:
    if k < 1:
        raise ValueError("retrieval_k must be at least 1")
    out = dict(query)
    start = time.perf_counter()
    text = query["question"]
    if refine:
        text, ok = refine_question(retriever.gateway, text)
        out["refiner_well_formed"] = ok
    out["refined_query"] = text
    candidates = retriever.search(text, query.get("image_ref", ""), k, alpha)
    items = []
    for c in candidates:
        e = retriever.index.get(c.entry_id)
        items.append({"entry_id": c.entry_id, "score": c.score, "entity_id": e.entity_id,
                      "article_id": e.article_id, "section_id": e.section_id,
                      "text": e.section_text})
    out["retrieved"] = items
    if timing:
        out.setdefault("timing", {})["retrieval_ms"] = _ms(start)
    return out


def rerank_record(record: Mapping, index: VectorIndex, gateway: Gateway, weights: FusionWeights) -> dict:
    """Stage 1 over the retrieved candidates, then stage 2 within the winning article."""
    out = dict(record)
    retrieved = record.get("retrieved") or []
    if not retrieved:
        raise ValueError("record has no retrieved candidates to rerank")
    candidates = [ScoredCandidate(int(r["entry_id"]), float(r["score"])) for r in retrieved]
    entries = [index.get(c.entry_id) for c in candidates]
    query = record["question"]
    s1 = stage1_rerank(query, candidates, entries, gateway, weights.beta1)
    context, degraded2, trace2 = stage2_article_rerank(
        query, s1.top1, index.article_entries(s1.top1.article_id), gateway, weights.beta2)
    out["stage1"] = s1.trace
    out["stage2"] = trace2
    out["rerank_degraded"] = s1.degraded or degraded2
    out["context"] = context.to_dict()
    return out


def reranked_order(record: Mapping) -> list[int]:
    """Final ranking of entry ids: the chosen context first, then the stage-1 order.

    Stage 2 may pick a section of the winning article that was not retrieved;
    the list is then cut back to the stage-1 length.
    """
    chosen = record["context"]["entry_id"]
    order = [chosen] + [t["entry_id"] for t in record["stage1"] if t["entry_id"] != chosen]
    return order[:len(record["stage1"])]


def answer_record(record: Mapping, inspector: Gateway, generator: Gateway,
                  dataset: str = "evqa", timing: bool = False) -> dict:
    if "context" not in record:
        raise ValueError("record has no reranked context to answer from")
    out = dict(record)
    context = RerankedContext(**record["context"])
    start = time.perf_counter()
    result = decide_and_route(record.get("image_ref", ""), record["question"], context,
                              inspector, generator, dataset)
    out["predicted_answer"] = result.answer
    out["route"] = result.route.value
    out["flagged"] = result.flagged
    out["diagnostic"] = result.diagnostic
    out["inspector_raw"] = result.inspection.raw_text if result.inspection else None
    out["context_section_id"] = section_key(context.article_id, context.section_id)
    if timing:
        out.setdefault("timing", {})["inference_ms"] = _ms(start)
    return out
