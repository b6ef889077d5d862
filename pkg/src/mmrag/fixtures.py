"""Ready-made synthetic setups: a stub-encoded index, the toy rewrite environment,
and the bundled evaluation records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .fusion import FusionConfig
from .gateway import Gateway, GatewayConfig
from .grpo import TemplateEnv
from .index import VectorIndex
from .kb import KbBuildConfig, build_kb
from .pipeline import Retriever, answer_record, rerank_record, retrieve_record
from .refiner import REWARD_DEPTH
from .rerank import FusionWeights
from .synthetic import make_entities, make_queries, make_sections

# Rollout templates for the toy policy. Only "entity" names what the image
# shows, so it dominates retrieval; "malformed" breaks the tag order.
TOY_TEMPLATES = {
    "echo": '<think>Restate the question.</think><answer>{"query": "{question}"}</answer>',
    "entity": ('<think>The image shows {entity_name}.</think>'
               '<answer>{"query": "{question} {entity_name}"}</answer>'),
    "malformed": '<answer>{"query": "{question}"}</answer><think>Too late.</think>',
    "caption": '<think>Describe the picture.</think><answer>{"query": "a photo of something"}</answer>',
}
# query images that show nothing identifiable, so the rewrite has to carry the entity
BLURRED_IMAGE = "img://blurred/query"


@dataclass
class SyntheticKb:
    index: VectorIndex
    gateway: Gateway
    fusion: FusionConfig
    sections: list[dict]
    entities: list


def build_synthetic_kb(n_entities: int = 50, seed: int = 0, fusion: FusionConfig | None = None,
                       gateway: Gateway | None = None) -> SyntheticKb:
    fusion = fusion or FusionConfig()
    gateway = gateway or Gateway(GatewayConfig(stub_seed=seed), text_dim=fusion.d_text, image_dim=fusion.d_vis)
    entities = make_entities(n_entities, seed)
    sections = make_sections(entities, seed)
    lines = [json.dumps(s) for s in sections]
    entries, diagnostics = build_kb(lines, KbBuildConfig(), gateway, fusion)
    if diagnostics:
        raise RuntimeError(f"synthetic KB produced diagnostics: {diagnostics[:3]}")
    index = VectorIndex(fusion.dim)
    index.add_entries(entries)
    index.seal()
    return SyntheticKb(index, gateway, fusion, sections, entities)


def build_toy_env(n_entities: int = 300, n_queries: int = 8, seed: int = 0,
                  templates: dict[str, str] | None = None, alpha: float | None = None) -> TemplateEnv:
    fusion = FusionConfig() if alpha is None else FusionConfig(alpha=alpha)
    kb = build_synthetic_kb(n_entities, seed, fusion)
    retriever = Retriever(kb.index, kb.gateway, fusion)
    queries = [dict(q, image_ref=BLURRED_IMAGE) for q in make_queries(kb.entities, n_queries, seed)]

    def retrieve(text: str, image_ref: str) -> list[str]:
        return [kb.index.get(c.entry_id).entity_id
                for c in retriever.search(text, image_ref, REWARD_DEPTH)]

    return TemplateEnv(dict(templates or TOY_TEMPLATES), queries, retrieve, REWARD_DEPTH)


def toy_env_from_spec(spec: dict, seed: int) -> TemplateEnv:
    known = {"entities", "queries", "templates", "alpha"}
    unknown = set(spec) - known
    if unknown:
        raise ValueError(f"unknown toy environment keys {sorted(unknown)}")
    return build_toy_env(int(spec.get("entities", 300)), int(spec.get("queries", 8)), seed,
                         spec.get("templates"), spec.get("alpha"))


def make_eval_records(n_entities: int = 60, n_queries: int = 50, seed: int = 0, k: int = 20,
                      blur_every: int = 3) -> list[dict]:
    """Run the STUB pipeline end to end over a synthetic KB and return answered records."""
    kb = build_synthetic_kb(n_entities, seed)
    retriever = Retriever(kb.index, kb.gateway, kb.fusion)
    weights = FusionWeights()
    out = []
    for q in make_queries(kb.entities, n_queries, seed, blur_every):
        rec = retrieve_record(q, retriever, k)
        rec = rerank_record(rec, kb.index, kb.gateway, weights)
        out.append(answer_record(rec, kb.gateway, kb.gateway))
    return out


BUNDLED_EVAL = "eval_fixture.jsonl"


def bundled_eval_path():
    return resources.files("mmrag") / "data" / BUNDLED_EVAL
