"""Inspector verdict parsing, decoupled answer routing, and routing evaluation.

A PASS verdict sends the question and context to the text generator; a FAIL
verdict answers with the inspector's own internal answer. Anything the parser
cannot read as a verdict goes down an explicit FALLBACK route.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .answers import relaxed_match
from .gateway import Gateway, GatewayError, TemplateId
from .rerank import RerankedContext

log = logging.getLogger(__name__)


class Decision(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"


class Route(str, Enum):
    GENERATOR = "GENERATOR"
    INTERNAL = "INTERNAL"
    FALLBACK = "FALLBACK"


@dataclass(frozen=True)
class InspectionResult:
    decision: Decision
    internal_answer: str | None
    parse_ok: bool
    raw_text: str


@dataclass(frozen=True)
class AnswerRecord:
    answer: str
    route: Route
    question: str
    context_entry_id: int
    flagged: bool = False
    diagnostic: str = ""
    inspection: InspectionResult | None = None


@dataclass(frozen=True)
class RoutingConfusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy}


_DECODER = json.JSONDecoder()


def _first_json_object(text: str) -> dict | None:
    start = text.find("{")
    while start >= 0:
        try:
            obj, _ = _DECODER.raw_decode(text, start)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    return None


def _truth(value) -> bool | None:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    return None


def parse_inspection(text) -> InspectionResult:
    """Read the first JSON object in ``text`` as a verdict. Total: never raises."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)
    obj = _first_json_object(text)
    verdict = _truth(obj.get("pass")) if obj is not None else None
    if verdict is None:
        return InspectionResult(Decision.FAIL, None, False, text)
    answer = obj.get("answer")
    if isinstance(answer, (int, float)) and not isinstance(answer, bool):
        answer = str(answer)
    if not isinstance(answer, str) or not answer.strip():
        answer = None
    if verdict:
        return InspectionResult(Decision.PASS, answer, True, text)
    # a FAIL verdict is only usable when it carries the internal answer
    return InspectionResult(Decision.FAIL, answer, answer is not None, text)


def generator_template(dataset: str) -> TemplateId:
    return TemplateId.GENERATOR_INFOSEEK if dataset.lower() == "infoseek" else TemplateId.GENERATOR_EVQA


def decide_and_route(image_ref: str, question: str, context: RerankedContext,
                     inspector_client: Gateway, generator_client: Gateway,
                     dataset: str = "evqa") -> AnswerRecord:
    if context is None:
        raise ValueError("a reranked context is required")
    try:
        raw = inspector_client.complete(TemplateId.INSPECTOR,
                                        {"Query": question, "Context": context.section_text},
                                        images=[image_ref] if image_ref else None)
    except GatewayError as exc:
        log.warning("inspector call failed: %s", exc)
        return AnswerRecord("", Route.FALLBACK, question, context.entry_id, True,
                            f"inspector failed: {exc}")
    inspection = parse_inspection(raw)

    if inspection.decision is Decision.PASS:
        try:
            answer = generator_client.complete(generator_template(dataset),
                                               {"Context": context.section_text, "Question": question})
        except GatewayError as exc:
            log.warning("generator call failed on PASS path: %s", exc)
            return AnswerRecord(raw, Route.FALLBACK, question, context.entry_id, True,
                                f"generator failed: {exc}", inspection)
        return AnswerRecord(answer.strip(), Route.GENERATOR, question, context.entry_id,
                            inspection=inspection)
    if inspection.parse_ok:
        return AnswerRecord(inspection.internal_answer, Route.INTERNAL, question, context.entry_id,
                            inspection=inspection)
    return AnswerRecord(raw, Route.FALLBACK, question, context.entry_id, True,
                        "inspector output is not a valid verdict", inspection)


def _as_decision(value) -> Decision:
    if isinstance(value, Decision):
        return value
    if isinstance(value, bool):
        return Decision.PASS if value else Decision.FAIL
    return Decision(str(value).upper())


def routing_confusion(predicted: Sequence, gold: Sequence) -> RoutingConfusion:
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(gold)} labels")
    if not predicted:
        raise ValueError("routing_confusion needs at least one decision")
    tp = fp = fn = tn = 0
    for p, g in zip(predicted, gold):
        p_pass = _as_decision(p) is Decision.PASS
        g_pass = _as_decision(g) is Decision.PASS
        if p_pass and g_pass:
            tp += 1
        elif p_pass:
            fp += 1
        elif g_pass:
            fn += 1
        else:
            tn += 1
    return RoutingConfusion(tp, fp, fn, tn)


@dataclass(frozen=True)
class InspectorLabel:
    decision: Decision
    target: dict

    def target_text(self) -> str:
        return json.dumps(self.target)


class UnlabelableError(ValueError):
    pass


def label_inspector_sample(record: Mapping) -> InspectorLabel:
    """Build an inspector training label from a retrieval outcome.

    Section-annotated records (``gold_section_id`` + ``context_section_id``)
    pass iff the top-1 section is the gold section. Entity-annotated records
    (``gold_entity``, ``retrieved_entities``, ``generator_answer``,
    ``gold_answers``) pass only if the gold entity was retrieved and the
    generator answer is correct under relaxed matching. FAIL labels carry the
    gold answer (or ``expanded_answer`` when provided) as the supervision target.
    """
    golds = list(record.get("gold_answers") or [])
    if record.get("gold_section_id"):
        passed = record.get("context_section_id") == record["gold_section_id"]
    elif record.get("gold_entity"):
        hit = record["gold_entity"] in (record.get("retrieved_entities") or [])
        answer = record.get("generator_answer")
        passed = hit and answer is not None and bool(golds) and relaxed_match(answer, golds)
    else:
        raise UnlabelableError("record has neither gold_section_id nor gold_entity")
    if passed:
        return InspectorLabel(Decision.PASS, {"pass": "true"})
    target_answer = record.get("expanded_answer") or (golds[0] if golds else None)
    if target_answer is None:
        raise UnlabelableError("FAIL label needs a gold answer as its target")
    return InspectorLabel(Decision.FAIL, {"pass": "false", "answer": target_answer})
