"""Answer normalization and matching for VQA accuracy.

Standard matching compares normalized strings. Relaxed matching also accepts
numbers within a relative tolerance of a numeric gold answer, and answers
that fall inside a gold year range.
"""

from __future__ import annotations

import re
import string
from typing import Iterable

RELATIVE_TOLERANCE = 0.10

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)
_NUMBER = re.compile(r"-?\d+(?:,\d{3})*(?:\.\d+)?|-?\.\d+")
_RANGE = re.compile(r"(-?\d+(?:\.\d+)?)\s*(?:-|–|—|to)\s*(-?\d+(?:\.\d+)?)")


def normalize_answer(text: str) -> str:
    text = text.lower().strip()
    text = text.translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def standard_match(prediction: str, golds: Iterable[str]) -> bool:
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(g) for g in golds)


def _first_number(text: str) -> float | None:
    m = _NUMBER.search(text)
    if m is None:
        return None
    return float(m.group(0).replace(",", ""))


def _interval(text: str) -> tuple[float, float] | None:
    m = _RANGE.search(text.strip())
    if m is None:
        return None
    lo, hi = float(m.group(1)), float(m.group(2))
    return (lo, hi) if lo <= hi else (hi, lo)


def numeric_match(prediction: str, gold: str, tolerance: float = RELATIVE_TOLERANCE) -> bool:
    gold_range = _interval(gold)
    if gold_range is not None:
        pred_range = _interval(prediction)
        if pred_range is not None:
            return gold_range[0] <= pred_range[0] and pred_range[1] <= gold_range[1]
        value = _first_number(prediction)
        return value is not None and gold_range[0] <= value <= gold_range[1]
    target = _first_number(gold)
    value = _first_number(prediction)
    if target is None or value is None:
        return False
    if target == 0:
        return value == 0
    return abs(value - target) <= tolerance * abs(target)


def relaxed_match(prediction: str, golds: Iterable[str], tolerance: float = RELATIVE_TOLERANCE) -> bool:
    golds = list(golds)
    if standard_match(prediction, golds):
        return True
    return any(numeric_match(prediction, g, tolerance) for g in golds)
