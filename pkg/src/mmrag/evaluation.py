"""Retrieval and answer metrics, SNR context mixing, and latency summaries.

Recall@K counts a record as a hit when its gold entity (or, without one, its
gold section) is among the top-K retrieved sections. Pseudo Recall@K instead
asks whether any top-K passage contains a gold answer string.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .answers import relaxed_match, standard_match
from .inspector import Decision, Route, RoutingConfusion, routing_confusion

DEFAULT_KS = (1, 5, 10, 20)


class MatchMode(str, Enum):
    STANDARD = "STANDARD"
    RELAXED = "RELAXED"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            return cls.__members__.get(value.upper())
        return None


@dataclass(frozen=True)
class RetrievedItem:
    entry_id: int
    score: float
    entity_id: str = ""
    section_key: str = ""
    text: str = ""


@dataclass
class EvalRecord:
    question: str
    gold_answers: list[str]
    gold_entity: str | None = None
    gold_section_id: str | None = None
    retrieved: list[RetrievedItem] = field(default_factory=list)
    predicted_answer: str | None = None
    route: str | None = None
    context_section_id: str | None = None
    retrieval_ms: float | None = None
    inference_ms: float | None = None

    def __post_init__(self) -> None:
        if not self.gold_answers or not all(isinstance(a, str) for a in self.gold_answers):
            raise ValueError("gold_answers must be a non-empty list of strings")
        scores = [r.score for r in self.retrieved]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieved candidates must be ordered by score descending")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalRecord":
        retrieved = [
            RetrievedItem(int(r["entry_id"]), float(r["score"]), r.get("entity_id", ""),
                          f"{r['article_id']}/{r['section_id']}" if "article_id" in r else r.get("section_id", ""),
                          r.get("text", ""))
            for r in obj.get("retrieved") or []
        ]
        timing = obj.get("timing") or {}
        return cls(
            question=obj["question"],
            gold_answers=list(obj["gold_answers"]),
            gold_entity=obj.get("gold_entity"),
            gold_section_id=obj.get("gold_section_id"),
            retrieved=retrieved,
            predicted_answer=obj.get("predicted_answer"),
            route=obj.get("route"),
            context_section_id=obj.get("context_section_id"),
            retrieval_ms=timing.get("retrieval_ms"),
            inference_ms=timing.get("inference_ms"),
        )


def _check_k(k: int) -> None:
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")


def _nonempty(records: Sequence) -> None:
    if not records:
        raise ValueError("no records to evaluate")


def _is_hit(record: EvalRecord, k: int) -> bool:
    top = record.retrieved[:k]
    if record.gold_entity:
        return any(r.entity_id == record.gold_entity for r in top)
    if record.gold_section_id:
        return any(r.section_key == record.gold_section_id for r in top)
    raise ValueError("record has neither gold_entity nor gold_section_id")


def recall_at_k(records: Sequence[EvalRecord], k: int) -> float:
    _check_k(k)
    _nonempty(records)
    return sum(_is_hit(r, k) for r in records) / len(records)


def _squash(text: str) -> str:
    return " ".join(text.lower().split())


def pseudo_recall_at_k(records: Sequence[EvalRecord], k: int) -> float:
    _check_k(k)
    _nonempty(records)
    hits = 0
    for rec in records:
        golds = [g for g in (_squash(a) for a in rec.gold_answers) if g]
        passages = [_squash(r.text) for r in rec.retrieved[:k]]
        hits += any(g in p for g in golds for p in passages)
    return hits / len(records)


def vqa_accuracy(records: Sequence[EvalRecord], mode: MatchMode | str = MatchMode.STANDARD) -> float:
    mode = MatchMode(mode)
    _nonempty(records)
    match = standard_match if mode is MatchMode.STANDARD else relaxed_match
    correct = 0
    for rec in records:
        if rec.predicted_answer is None:
            raise ValueError(f"record without predicted_answer: {rec.question!r}")
        correct += match(rec.predicted_answer, rec.gold_answers)
    return correct / len(records)


def snr_gold_count(ratio: float, slots: int) -> int:
    """``round(ratio * slots)`` with halves rounded up rather than to even."""
    return int(math.floor(ratio * slots + 0.5 + 1e-9))


def mix_snr_context(gold_sections: Sequence[str], distractor_pool: Sequence[str], ratio: float,
                    slots: int, seed: int) -> list[tuple[str, bool]]:
    """Fill ``slots`` context positions with a fixed share of gold sections.

    Returns ``(text, is_gold)`` pairs in a seeded shuffled order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if slots < 1:
        raise ValueError("slots must be positive")
    n_gold = snr_gold_count(ratio, slots)
    n_noise = slots - n_gold
    if n_gold > len(gold_sections):
        raise ValueError(f"need {n_gold} gold sections, only {len(gold_sections)} available")
    if n_noise > len(distractor_pool):
        raise ValueError(f"need {n_noise} distractors, only {len(distractor_pool)} available")
    rng = random.Random(seed)
    mixed = [(s, True) for s in rng.sample(list(gold_sections), n_gold)]
    mixed += [(s, False) for s in rng.sample(list(distractor_pool), n_noise)]
    rng.shuffle(mixed)
    return mixed


def latency_report(records: Iterable[EvalRecord]) -> dict:
    """Mean per-stage latency (ms) over records that carry timings."""
    records = list(records)
    retrieval = [r.retrieval_ms for r in records if r.retrieval_ms is not None]
    inference = [r.inference_ms for r in records if r.inference_ms is not None]
    if not retrieval and not inference:
        raise ValueError("no timed records")
    return {
        "mean_retrieval_ms": sum(retrieval) / len(retrieval) if retrieval else None,
        "mean_inference_ms": sum(inference) / len(inference) if inference else None,
    }


def routing_from_records(records: Sequence[EvalRecord]) -> RoutingConfusion | None:
    """Routing confusion over answered records whose context can be judged against a gold section.

    The gold decision is PASS iff the chosen context is the gold section; the
    predicted decision is PASS iff the answer came from the generator.
    """
    pred, gold = [], []
    for r in records:
        if r.route is None or not r.gold_section_id or not r.context_section_id:
            continue
        pred.append(Decision.PASS if r.route == Route.GENERATOR.value else Decision.FAIL)
        gold.append(Decision.PASS if r.context_section_id == r.gold_section_id else Decision.FAIL)
    return routing_confusion(pred, gold) if pred else None


@dataclass
class MetricsReport:
    n_records: int
    recall_at: dict[int, float]
    pseudo_recall_at: dict[int, float]
    vqa_standard: float | None = None
    vqa_relaxed: float | None = None
    routing: RoutingConfusion | None = None
    mean_retrieval_ms: float | None = None
    mean_inference_ms: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "pseudo_recall_at": {str(k): v for k, v in self.pseudo_recall_at.items()},
            "vqa_standard": self.vqa_standard,
            "vqa_relaxed": self.vqa_relaxed,
            "routing": self.routing.to_dict() if self.routing else None,
            "mean_retrieval_ms": self.mean_retrieval_ms,
            "mean_inference_ms": self.mean_inference_ms,
        }

    def to_csv(self) -> str:
        row = {f"R@{k}": v for k, v in self.recall_at.items()}
        row.update({f"PR@{k}": v for k, v in self.pseudo_recall_at.items()})
        row.update({
            "vqa_std": self.vqa_standard,
            "vqa_relaxed": self.vqa_relaxed,
            "routing_accuracy": self.routing.accuracy if self.routing else None,
            "mean_retrieval_ms": self.mean_retrieval_ms,
            "mean_inference_ms": self.mean_inference_ms,
            "n_records": self.n_records,
        })
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(row))
        writer.writerow(["" if v is None else v for v in row.values()])
        return buf.getvalue()


def evaluate(records: Sequence[EvalRecord], ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    _nonempty(records)
    ks = sorted(set(ks))
    for k in ks:
        _check_k(k)
    report = MetricsReport(
        n_records=len(records),
        recall_at={k: recall_at_k(records, k) for k in ks},
        pseudo_recall_at={k: pseudo_recall_at_k(records, k) for k in ks},
        routing=routing_from_records(records),
    )
    answered = [r for r in records if r.predicted_answer is not None]
    if answered:
        report.vqa_standard = vqa_accuracy(answered, MatchMode.STANDARD)
        report.vqa_relaxed = vqa_accuracy(answered, MatchMode.RELAXED)
    try:
        lat = latency_report(records)
    except ValueError:
        lat = {}
    report.mean_retrieval_ms = lat.get("mean_retrieval_ms")
    report.mean_inference_ms = lat.get("mean_inference_ms")
    return report
