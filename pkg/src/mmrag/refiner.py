"""Query-rewriter rollouts: output parsing, rewards, and RL-dataset sampling.

A rollout must look like ``<think>...</think><answer>{"query": "..."}</answer>``.
Its reward is a format term (+1 / -4) plus a retrieval term read off a fixed
step table of the gold entity's hit rank among the top 200 retrieved
entities (-2.5 on a miss).
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

FORMAT_OK = 1.0
FORMAT_PENALTY = -4.0
MISS_PENALTY = -2.5
REWARD_DEPTH = 200

# (last rank of the bucket, reward); buckets start right after the previous bound
RETRIEVAL_REWARD_TABLE: tuple[tuple[int, float], ...] = (
    (5, 4.0),
    (10, 3.5),
    (20, 3.0),
    (50, 1.0),
    (100, 0.5),
    (200, 0.1),
)

SAMPLING_BUCKETS = ("[1,5]", "[6,10]", "[11,20]", "[21,200]", "miss")
EVQA_SAMPLING_PLAN = {"[1,5]": 500, "[6,10]": 1000, "[11,20]": 1000, "[21,200]": 2500, "miss": 2000}
INFOSEEK_SAMPLING_PLAN = {"[1,5]": 0, "[6,10]": 500, "[11,20]": 1000, "[21,200]": 2500, "miss": 3000}

_TAG = re.compile(r"</?(think|answer)>")


@dataclass(frozen=True)
class RefinerOutput:
    raw_text: str
    think: str | None = None
    answer_payload: str | None = None
    refined_query: str | None = None
    well_formed: bool = False


@dataclass(frozen=True)
class RewardRecord:
    format_reward: float
    retrieval_reward: float
    total: float
    hit_rank: int | None = None


def parse_refiner_output(text) -> RefinerOutput:
    """Parse a rollout; never raises, malformation shows up as ``well_formed=False``."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = str(text)

    tags = [m.group(0) for m in _TAG.finditer(text)]
    if tags != ["<think>", "</think>", "<answer>", "</answer>"]:
        return RefinerOutput(raw_text=text)
    think_start = text.index("<think>") + len("<think>")
    think_end = text.index("</think>")
    answer_start = text.index("<answer>") + len("<answer>")
    answer_end = text.index("</answer>")
    think = text[think_start:think_end]
    payload = text[answer_start:answer_end]
    try:
        obj = json.loads(payload)
    except (ValueError, RecursionError):
        return RefinerOutput(raw_text=text, think=think, answer_payload=payload)
    query = obj.get("query") if isinstance(obj, dict) else None
    if not isinstance(query, str) or not query.strip():
        return RefinerOutput(raw_text=text, think=think, answer_payload=payload)
    return RefinerOutput(raw_text=text, think=think, answer_payload=payload,
                         refined_query=query.strip(), well_formed=True)


def format_reward(output: RefinerOutput) -> float:
    return FORMAT_OK if output.well_formed else FORMAT_PENALTY


def entity_hit_rank(entity_ids: Iterable[str], gold_entity: str, depth: int = REWARD_DEPTH) -> int | None:
    """1-based rank of ``gold_entity`` among the first ``depth`` distinct entities, in retrieval order."""
    seen: set[str] = set()
    for entity in entity_ids:
        if entity in seen:
            continue
        seen.add(entity)
        if len(seen) > depth:
            return None
        if entity == gold_entity:
            return len(seen)
    return None


def retrieval_reward(rank: int | None) -> float:
    if rank is None:
        return MISS_PENALTY
    if isinstance(rank, bool) or not isinstance(rank, int):
        raise TypeError(f"rank must be an int or None, got {type(rank).__name__}")
    if not 1 <= rank <= REWARD_DEPTH:
        raise ValueError(f"rank must lie in [1, {REWARD_DEPTH}], got {rank}")
    for bound, reward in RETRIEVAL_REWARD_TABLE:
        if rank <= bound:
            return reward
    raise AssertionError("unreachable")


def total_reward(output: RefinerOutput, rank: int | None,
                 skip_retrieval_on_malformed: bool = True) -> RewardRecord:
    """Format reward plus retrieval reward.

    Malformed rollouts never reach retrieval by default and take the miss
    penalty, so a lucky garbage string cannot earn retrieval credit.
    """
    fmt = format_reward(output)
    if not output.well_formed and skip_retrieval_on_malformed:
        rank = None
    ret = retrieval_reward(rank)
    return RewardRecord(fmt, ret, fmt + ret, rank)


def rank_bucket(rank: int | None) -> str:
    if rank is None:
        return "miss"
    if not 1 <= rank <= REWARD_DEPTH:
        raise ValueError(f"rank must lie in [1, {REWARD_DEPTH}], got {rank}")
    if rank <= 5:
        return "[1,5]"
    if rank <= 10:
        return "[6,10]"
    if rank <= 20:
        return "[11,20]"
    return "[21,200]"


class InsufficientPoolError(ValueError):
    def __init__(self, shortfall: dict[str, int]):
        detail = ", ".join(f"{b}: short by {n}" for b, n in shortfall.items())
        super().__init__(f"not enough records per bucket ({detail})")
        self.shortfall = shortfall


def sample_training_queries(records: Sequence[tuple[Hashable, int | None]],
                            plan: Mapping[str, int], seed: int) -> list[tuple[Hashable, int | None]]:
    """Draw exactly ``plan[bucket]`` records uniformly from each hit-rank bucket.

    The result keeps the input order of the chosen records, so identical
    ``(records, plan, seed)`` always produce the identical list.
    """
    unknown = set(plan) - set(SAMPLING_BUCKETS)
    if unknown:
        raise ValueError(f"unknown buckets {sorted(unknown)}")
    if any(n < 0 for n in plan.values()):
        raise ValueError("bucket counts must be non-negative")

    pools: dict[str, list[int]] = {b: [] for b in SAMPLING_BUCKETS}
    for i, (_, rank) in enumerate(records):
        pools[rank_bucket(rank)].append(i)
    shortfall = {b: n - len(pools[b]) for b, n in plan.items() if n > len(pools[b])}
    if shortfall:
        raise InsufficientPoolError(shortfall)

    rng = random.Random(seed)
    chosen: list[int] = []
    for bucket in SAMPLING_BUCKETS:
        chosen.extend(rng.sample(pools[bucket], plan.get(bucket, 0)))
    return [records[i] for i in sorted(chosen)]
