"""Group-relative policy optimization on a categorical toy policy.

The policy chooses one of a few query-rewrite templates. Because it is a
softmax over logits, the clipped surrogate and the KL penalty have closed-form
gradients, so the whole update is exact and cheap enough to run in tests.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .refiner import entity_hit_rank, parse_refiner_output, total_reward

STD_FLOOR = 1e-8
_FIELD = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 5
    clip_epsilon: float = 0.2
    kl_coef: float = 0.04
    learning_rate: float = 0.5
    steps: int = 600
    sample_temperature: float = 0.7
    seed: int = 0
    queries_per_step: int = 4
    updates_per_batch: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.sample_temperature <= 0:
            raise ValueError("sample_temperature must be positive")
        if self.queries_per_step < 1 or self.updates_per_batch < 1:
            raise ValueError("queries_per_step and updates_per_batch must be positive")


@dataclass
class GrpoGroup:
    rewards: np.ndarray
    ratios: np.ndarray
    advantages: np.ndarray
    kl_value: float = 0.0

    def __post_init__(self) -> None:
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if not (len(self.rewards) == len(self.ratios) == len(self.advantages)):
            raise ValueError("rewards, ratios and advantages must have equal length")
        if np.any(self.ratios <= 0):
            raise ValueError("ratios must be positive")
        if self.kl_value < 0:
            raise ValueError("kl_value must be non-negative")


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within a group (population std); flat groups get zero advantage."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_term(rho: float, advantage: float, epsilon: float) -> float:
    if rho <= 0:
        raise ValueError("probability ratio must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    clipped = min(max(rho, 1.0 - epsilon), 1.0 + epsilon)
    return min(rho * advantage, clipped * advantage)


def grpo_objective(group: GrpoGroup, cfg: GrpoConfig) -> float:
    if len(group.rewards) != cfg.group_size:
        raise ValueError(f"group has {len(group.rewards)} samples, config expects {cfg.group_size}")
    surrogate = np.mean([clipped_term(r, a, cfg.clip_epsilon)
                         for r, a in zip(group.ratios, group.advantages)])
    return float(surrogate - cfg.kl_coef * group.kl_value)


def categorical_kl(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be 1-D and of equal length")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p is positive")
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass
class ToyPolicy:
    logits: np.ndarray
    action_names: list[str]

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (len(self.action_names),):
            raise ValueError("one logit per action is required")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    def probabilities(self, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logits, temperature)

    def to_dict(self, temperature: float = 1.0) -> dict:
        return {
            "action_names": list(self.action_names),
            "logits": self.logits.tolist(),
            "temperature": temperature,
            "probabilities": self.probabilities(temperature).tolist(),
        }


@dataclass
class SampledGroup:
    actions: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray


def objective_and_gradient(logits: np.ndarray, old_probs: np.ndarray, ref_probs: np.ndarray,
                           groups: Sequence[SampledGroup], cfg: GrpoConfig) -> tuple[float, np.ndarray]:
    """Mean GRPO objective over ``groups`` and its exact gradient w.r.t. ``logits``.

    The policy is ``softmax(logits / T)`` with ``T = cfg.sample_temperature``,
    so ``d log pi(a) / d logits = (onehot(a) - pi) / T``. A clipped sample only
    contributes gradient when the unclipped branch is the one selected by the min.
    """
    temp = cfg.sample_temperature
    probs = softmax(logits, temp)
    kl = categorical_kl(probs, ref_probs)
    log_ratio = np.log(probs / ref_probs)
    kl_grad = probs * (log_ratio - kl) / temp

    eps = cfg.clip_epsilon
    total_obj = 0.0
    total_grad = np.zeros_like(probs)
    for g in groups:
        ratios = probs[g.actions] / old_probs[g.actions]
        group = GrpoGroup(g.rewards, ratios, g.advantages, kl)
        total_obj += grpo_objective(group, cfg)
        clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps)
        active = ratios * g.advantages <= clipped * g.advantages
        grad = np.zeros_like(probs)
        for a, rho, adv, on in zip(g.actions, ratios, g.advantages, active):
            if on:
                score = -probs.copy()
                score[a] += 1.0
                grad += adv * rho * score / temp
        total_grad += grad / len(g.actions) - cfg.kl_coef * kl_grad
    n = len(groups)
    return total_obj / n, total_grad / n


class RewriteEnv(Protocol):
    action_names: Sequence[str]

    @property
    def num_queries(self) -> int: ...

    def reward(self, query_index: int, action: int) -> float: ...


@dataclass
class TemplateEnv:
    """Rewrite templates scored by retrieval.

    Each template is a full rollout string with ``{question}``, ``{entity_name}``
    and similar fields filled from the query record. ``retrieve`` maps
    ``(refined_query, image_ref)`` to entity ids in retrieval order; rewards
    follow the refiner reward exactly and are memoized since the environment
    is deterministic.
    """

    templates: dict[str, str]
    queries: list[dict]
    retrieve: Callable[[str, str], Sequence[str]]
    depth: int = 200
    _cache: dict[tuple[int, int], float] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.action_names = list(self.templates)

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    def rollout(self, query_index: int, action: int) -> str:
        template = self.templates[self.action_names[action]]
        record = self.queries[query_index]
        # values are JSON-escaped so templates may place them inside the JSON answer
        return _FIELD.sub(lambda m: json.dumps(str(record[m.group(1)]))[1:-1], template)

    def reward(self, query_index: int, action: int) -> float:
        key = (query_index, action)
        if key not in self._cache:
            output = parse_refiner_output(self.rollout(query_index, action))
            rank = None
            if output.well_formed:
                query = self.queries[query_index]
                entities = self.retrieve(output.refined_query, query.get("image_ref", ""))
                rank = entity_hit_rank(entities, query["gold_entity"], self.depth)
            self._cache[key] = total_reward(output, rank).total
        return self._cache[key]


@dataclass
class TrainingResult:
    policy: ToyPolicy
    curve: list[dict]


def train_toy_policy(env: RewriteEnv, cfg: GrpoConfig,
                     initial_logits: Sequence[float] | None = None) -> TrainingResult:
    names = list(env.action_names)
    if len(names) < 2:
        raise ValueError("the environment needs at least two actions")
    if env.num_queries < 1:
        raise ValueError("the environment has no queries")
    rng = np.random.default_rng(cfg.seed)
    temp = cfg.sample_temperature
    logits = np.zeros(len(names)) if initial_logits is None else np.array(initial_logits, dtype=np.float64)
    policy = ToyPolicy(logits, names)
    ref_probs = policy.probabilities(temp)
    batch = min(cfg.queries_per_step, env.num_queries)

    curve = []
    for step in range(cfg.steps):
        old_probs = policy.probabilities(temp)
        query_ids = rng.choice(env.num_queries, size=batch, replace=False)
        groups = []
        for q in query_ids:
            actions = rng.choice(len(names), size=cfg.group_size, p=old_probs)
            rewards = np.array([env.reward(int(q), int(a)) for a in actions])
            groups.append(SampledGroup(actions, rewards, compute_advantages(rewards)))

        objective = None
        for _ in range(cfg.updates_per_batch):
            value, grad = objective_and_gradient(policy.logits, old_probs, ref_probs, groups, cfg)
            if objective is None:
                objective = value
            policy.logits = policy.logits + cfg.learning_rate * grad

        curve.append({
            "step": step,
            "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
            "objective": objective,
            "kl": categorical_kl(old_probs, ref_probs),
        })
    return TrainingResult(policy, curve)


def write_curve_csv(curve: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mean_reward", "objective", "kl"])
        for row in curve:
            writer.writerow([row["step"], repr(row["mean_reward"]), repr(row["objective"]),
                             repr(row["kl"])])
