"""Two-stage reranking with score fusion.

Stage 1 fuses the dense-retrieval cosine with a multimodal reranker score
(weight ``beta1`` on retrieval). Stage 2 takes the stage-1 winner, scores
every section of its article with a text reranker and fuses that with the
stage-1 score (weight ``beta2`` on stage 1). Both stages min-max normalize
each score list per query before mixing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gateway import Gateway, GatewayError
from .index import KbEntry, ScoredCandidate

log = logging.getLogger(__name__)

BETA1_EVQA = 0.6
BETA1_INFOSEEK = 0.8
BETA2_DEFAULT = 0.2


@dataclass(frozen=True)
class FusionWeights:
    beta1: float = BETA1_EVQA
    beta2: float = BETA2_DEFAULT

    def __post_init__(self) -> None:
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class RerankedContext:
    entry_id: int
    article_id: str
    section_text: str
    stage1_score: float
    stage2_score: float
    section_id: str = ""
    entity_id: str = ""

    def to_dict(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "article_id": self.article_id,
            "section_id": self.section_id,
            "entity_id": self.entity_id,
            "section_text": self.section_text,
            "stage1_score": self.stage1_score,
            "stage2_score": self.stage2_score,
        }


@dataclass
class Stage1Result:
    ordered: list[RerankedContext]
    degraded: bool = False
    trace: list[dict] = field(default_factory=list)

    @property
    def top1(self) -> RerankedContext:
        return self.ordered[0]


def minmax_normalize(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] == 0:
        raise ValueError("need at least one score")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def fuse(retrieval_scores: Sequence[float], rerank_scores: Sequence[float], beta: float) -> np.ndarray:
    """``beta * retrieval + (1 - beta) * rerank``, element-wise."""
    r = np.asarray(retrieval_scores, dtype=np.float64)
    m = np.asarray(rerank_scores, dtype=np.float64)
    if r.shape != m.shape:
        raise ValueError(f"length mismatch: {r.shape[0]} retrieval vs {m.shape[0]} rerank scores")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta * r + (1.0 - beta) * m


def _order(scores: np.ndarray, ids: Sequence[int], raw: Sequence[float] | None = None) -> list[int]:
    """Positions sorted by score descending, then raw score descending, then entry id ascending.

    The raw-score key matters when min-max scaling rounds two distinct inputs
    to the same value; without it beta=1 could reorder the retrieval list.
    """
    keys = [np.asarray(ids)]
    if raw is not None:
        keys.append(-np.asarray(raw, dtype=np.float64))
    keys.append(-scores)
    return list(np.lexsort(keys))


def stage1_rerank(query: str, candidates: Sequence[ScoredCandidate], entries: Sequence[KbEntry],
                  gateway: Gateway, beta1: float) -> Stage1Result:
    """Fuse retrieval and multimodal-rerank scores over the retrieved candidates.

    ``entries[i]`` is the KB entry of ``candidates[i]``. If the reranker call
    fails, the retrieval order is returned unchanged with ``degraded=True``.
    """
    if not candidates:
        raise ValueError("stage 1 needs at least one candidate")
    if len(entries) != len(candidates):
        raise ValueError("one KB entry per candidate is required")
    ids = [c.entry_id for c in candidates]
    retrieval = minmax_normalize([c.score for c in candidates])
    try:
        raw = gateway.rerank(query, [e.section_text for e in entries])
        rerank = minmax_normalize(raw)
        fused = fuse(retrieval, rerank, beta1)
        degraded = False
    except GatewayError as exc:
        log.warning("stage-1 reranker unavailable, keeping retrieval order: %s", exc)
        raw = [None] * len(candidates)
        rerank = np.zeros(len(candidates))
        fused = retrieval
        degraded = True

    order = list(range(len(candidates))) if degraded else _order(fused, ids, [c.score for c in candidates])
    ordered = [
        RerankedContext(ids[i], entries[i].article_id, entries[i].section_text,
                        float(fused[i]), float(fused[i]), entries[i].section_id, entries[i].entity_id)
        for i in order
    ]
    trace = [{"entry_id": ids[i], "retrieval": candidates[i].score, "rerank": raw[i],
              "fused": float(fused[i])} for i in order]
    return Stage1Result(ordered, degraded, trace)


def stage2_article_rerank(query: str, top1: RerankedContext, article_sections: Sequence[KbEntry],
                          gateway: Gateway, beta2: float) -> tuple[RerankedContext, bool, list[dict]]:
    """Pick the best section of ``top1``'s article.

    The stage-1 score exists only for ``top1``'s own section; other sections
    start at 0 before normalization. Returns ``(context, degraded, trace)``.
    """
    sections = [s for s in article_sections if s.article_id == top1.article_id]
    if not any(s.entry_id == top1.entry_id for s in sections):
        raise ValueError("article_sections must include the stage-1 section")
    if len(sections) == 1:
        only = sections[0]
        return (RerankedContext(only.entry_id, only.article_id, only.section_text,
                                top1.stage1_score, top1.stage1_score, only.section_id,
                                only.entity_id), False, [])

    ids = [s.entry_id for s in sections]
    stage1 = np.array([top1.stage1_score if i == top1.entry_id else 0.0 for i in ids])
    try:
        raw = gateway.rerank(query, [s.section_text for s in sections])
    except GatewayError as exc:
        log.warning("stage-2 reranker unavailable, keeping stage-1 section: %s", exc)
        return top1, True, []
    fused = fuse(minmax_normalize(stage1), minmax_normalize(raw), beta2)
    best = _order(fused, ids)[0]
    chosen = sections[best]
    trace = [{"entry_id": ids[i], "stage1": float(stage1[i]), "text": raw[i],
              "fused": float(fused[i])} for i in range(len(ids))]
    context = RerankedContext(chosen.entry_id, chosen.article_id, chosen.section_text,
                              float(stage1[best]), float(fused[best]), chosen.section_id,
                              chosen.entity_id)
    return context, False, trace
