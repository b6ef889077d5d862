"""Grid sweeps over the query-side weights (alpha, beta1, beta2) and retrieval depth.

One immutable index serves every grid point. Query embeddings are cached, so
an alpha sweep only re-fuses query vectors. Grid values may be literal numbers
or ``{"start", "stop", "step"}`` ranges (inclusive), which lets a coarse scan
and a fine sub-range sit in the same list.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from decimal import Decimal
from typing import Mapping, Sequence

from .evaluation import EvalRecord, pseudo_recall_at_k, recall_at_k, vqa_accuracy
from .gateway import Gateway
from .pipeline import Retriever, answer_record, rerank_record, reranked_order, retrieve_record
from .rerank import FusionWeights

SWEEP_PARAMS = ("alpha", "beta1", "beta2", "k")
METRIC_COLUMNS = ("R@1", "R@5", "R@10", "R@20", "PR@5", "PR@20", "vqa_std", "vqa_relaxed")
STAGES = ("retrieval", "rerank", "full")


def _range(spec: Mapping) -> list[float]:
    try:
        start, stop, step = (Decimal(str(spec[k])) for k in ("start", "stop", "step"))
    except KeyError as exc:
        raise ValueError(f"range needs start, stop and step (missing {exc})") from None
    if step <= 0 or stop < start:
        raise ValueError(f"empty or backwards range {dict(spec)}")
    out, v = [], start
    # Decimal keeps 0.55 + 0.01 * n exact so fine ranges print cleanly
    while v <= stop:
        out.append(float(v))
        v += step
    return out


def expand_values(name: str, spec) -> list:
    if name not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {name!r}; expected one of {SWEEP_PARAMS}")
    items = spec if isinstance(spec, list) else [spec]
    values = []
    for item in items:
        values.extend(_range(item) if isinstance(item, Mapping) else [item])
    if not values:
        raise ValueError(f"parameter {name} has no values")
    seen, out = set(), []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"{name} values must be numbers, got {v!r}")
        if name == "k":
            if int(v) != v or v < 1:
                raise ValueError(f"k must be a positive integer, got {v}")
            v = int(v)
        elif not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def expand_grid(grid: Mapping) -> list[dict]:
    """Cartesian product in fixed parameter order; values keep their listed order."""
    if not grid:
        raise ValueError("sweep grid is empty")
    axes = {name: expand_values(name, grid[name]) for name in SWEEP_PARAMS if name in grid}
    unknown = set(grid) - set(SWEEP_PARAMS)
    if unknown:
        raise ValueError(f"unknown sweep parameters {sorted(unknown)}")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*axes.values())]


@dataclass
class SweepSetup:
    retriever: Retriever
    inspector: Gateway
    generator: Gateway
    alpha: float
    beta1: float
    beta2: float
    k: int
    refine: bool = True
    dataset: str = "evqa"
    stage: str = "retrieval"

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")


def _metrics(records: list[dict], with_answers: bool) -> dict:
    evals = [EvalRecord.from_dict(r) for r in records]
    row = {}
    for k in (1, 5, 10, 20):
        row[f"R@{k}"] = recall_at_k(evals, k)
    for k in (5, 20):
        row[f"PR@{k}"] = pseudo_recall_at_k(evals, k)
    row["vqa_std"] = vqa_accuracy(evals, "STANDARD") if with_answers else None
    row["vqa_relaxed"] = vqa_accuracy(evals, "RELAXED") if with_answers else None
    return row


def _apply_rerank_order(record: dict) -> dict:
    by_id = {r["entry_id"]: r for r in record["retrieved"]}
    ctx = record["context"]
    by_id.setdefault(ctx["entry_id"], {"entry_id": ctx["entry_id"], "entity_id": ctx["entity_id"],
                                       "article_id": ctx["article_id"], "section_id": ctx["section_id"],
                                       "text": ctx["section_text"]})
    order = reranked_order(record)
    # metrics only read the order; scores are replaced by a rank-preserving countdown
    ranked = []
    for pos, eid in enumerate(order):
        item = dict(by_id[eid])
        item["score"] = float(len(order) - pos)
        ranked.append(item)
    return dict(record, retrieved=ranked)


def run_point(point: Mapping, setup: SweepSetup, queries: Sequence[Mapping]) -> dict:
    params = {"alpha": setup.alpha, "beta1": setup.beta1, "beta2": setup.beta2, "k": setup.k}
    params.update(point)
    weights = FusionWeights(params["beta1"], params["beta2"])
    index = setup.retriever.index
    records = []
    for q in queries:
        rec = retrieve_record(q, setup.retriever, params["k"], setup.refine, params["alpha"])
        if setup.stage != "retrieval":
            rec = rerank_record(rec, index, setup.retriever.gateway, weights)
            if setup.stage == "full":
                rec = answer_record(rec, setup.inspector, setup.generator, setup.dataset)
            rec = _apply_rerank_order(rec)
        records.append(rec)
    return {**params, **_metrics(records, setup.stage == "full")}


def run_sweep(grid: Mapping, setup: SweepSetup, queries: Sequence[Mapping]) -> list[dict]:
    if not queries:
        raise ValueError("sweep needs at least one query record")
    return [run_point(p, setup, queries) for p in expand_grid(grid)]


def sweep_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(SWEEP_PARAMS) + list(METRIC_COLUMNS))
    for row in rows:
        cells = []
        for col in SWEEP_PARAMS + METRIC_COLUMNS:
            v = row.get(col)
            cells.append("" if v is None else repr(v) if isinstance(v, float) else v)
        writer.writerow(cells)
    return buf.getvalue()


def refine_range(rows: Sequence[Mapping], param: str, metric: str = "R@5",
                 half_width: float = 0.05, step: float = 0.01) -> dict:
    """Fine range centred on the best coarse value of ``param`` (ties go to the smallest value)."""
    if not rows:
        raise ValueError("no sweep rows to refine")
    best = max(rows, key=lambda r: (r[metric], -r[param]))[param]
    lo = max(0.0, round(best - half_width, 10))
    hi = min(1.0, round(best + half_width, 10))
    return {"start": lo, "stop": hi, "step": step}
