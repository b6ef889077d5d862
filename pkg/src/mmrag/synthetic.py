"""Seeded synthetic encyclopedia: entities, article sections, and VQA-style queries.

Image references are opaque strings such as ``img://e0007/s2``; the stub
image encoder hashes their tokens, so an image "shows" the entity whose id it
contains. Every query's gold section states the gold answer in its first
sentence.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass

_SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "vas", "dor", "e", "fi", "gan", "hul", "is",
              "jo", "ker", "ma", "nor", "op", "qui", "sal", "ther", "ul", "ven", "wy", "zar"]
_CATEGORIES = ["bird", "tower", "bridge", "flower", "beetle", "castle", "lizard", "cathedral"]
_REGIONS = ["northern highlands", "coastal wetlands", "eastern plains", "river delta",
            "southern forests", "alpine valleys", "western islands", "central basin"]
_COLORS = ["crimson", "slate", "amber", "olive", "ivory", "cobalt", "ochre", "silver"]
_FILLER = ("observers often note its distinctive outline and the way it fits the surrounding "
           "landscape across different seasons of the year").split()


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    category: str
    year: int
    region: str
    color: str


def _word(rng: random.Random) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3))).capitalize()


def make_entities(n: int, seed: int = 0) -> list[Entity]:
    rng = random.Random(seed)
    names: set[str] = set()
    out = []
    for i in range(n):
        name = f"{_word(rng)} {_word(rng)}"
        while name in names:
            name = f"{_word(rng)} {_word(rng)}"
        names.add(name)
        out.append(Entity(f"E{i:04d}", name, rng.choice(_CATEGORIES), rng.randint(1700, 1999),
                          rng.choice(_REGIONS), rng.choice(_COLORS)))
    return out


def _filler(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(_FILLER) for _ in range(n))


def make_sections(entities: list[Entity], seed: int = 0, long_every: int = 10) -> list[dict]:
    """Three to four sections per entity: description, habitat, references, and sometimes a long history."""
    rng = random.Random(seed + 1)
    rows = []
    for idx, e in enumerate(entities):
        article = f"A{e.entity_id[1:]}"
        key = e.entity_id.lower()
        abstract = f"The {e.name} is a {e.category} associated with the {e.region}."
        base = dict(article_id=article, article_title=e.name, article_abstract=abstract,
                    entity_id=e.entity_id)
        rows.append(dict(base, section_id="s1", section_title="Description",
                         image_ref=f"img://{key}/s1",
                         text=(f"The {e.name} was first described in {e.year}. It is a {e.category} "
                               f"with a {e.color} appearance. {e.name} " + _filler(rng, 40))))
        rows.append(dict(base, section_id="s2", section_title="Habitat",
                         image_ref=f"img://{key}/s2",
                         text=(f"The {e.name} is found in the {e.region}. Local surveys of the "
                               f"{e.category} " + _filler(rng, 40))))
        rows.append(dict(base, section_id="s3", section_title="References",
                         image_ref=f"img://{key}/s3",
                         text=f"Smith {e.year}. Field guide to the {e.region}."))
        if long_every and idx % long_every == 0:
            rows.append(dict(base, section_id="s4", section_title="History",
                             image_ref=f"img://{key}/s4",
                             text=f"The history of the {e.name} " + _filler(rng, 600)))
    return rows


def make_queries(entities: list[Entity], n: int, seed: int = 0, blur_every: int = 0) -> list[dict]:
    """VQA-style queries; every ``blur_every``-th query gets an unidentifiable image."""
    rng = random.Random(seed + 2)
    picks = rng.sample(entities, min(n, len(entities)))
    out = []
    for i, e in enumerate(picks):
        key = e.entity_id.lower()
        if i % 2 == 0:
            question = f"When was this {e.category} first described?"
            answers, section = [str(e.year)], "s1"
        else:
            question = f"In which region is this {e.category} found?"
            answers, section = [e.region], "s2"
        out.append({
            "query_id": f"q{i:04d}",
            "question": question,
            "image_ref": "img://blurred/query" if blur_every and i % blur_every == blur_every - 1
                         else f"img://{key}/query",
            "gold_entity": e.entity_id,
            "gold_section_id": f"A{e.entity_id[1:]}/{section}",
            "gold_answers": answers,
            "entity_name": e.name,
        })
    return out


def entity_table(entities: list[Entity]) -> list[dict]:
    return [asdict(e) for e in entities]
