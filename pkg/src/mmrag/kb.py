"""Knowledge-base construction from raw article sections.

Each input line is one JSON object with the :class:`RawSection` fields. A
section's text is used as-is, summarized by the chat model when it is long,
or swapped for the article abstract when it is short or a boilerplate section
(references, external links, ...).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Iterable

from .fusion import FusionConfig, build_kb_vector
from .gateway import Gateway, GatewayError, TemplateId
from .index import KbEntry

log = logging.getLogger(__name__)

DEFAULT_BLOCKLIST = frozenset({"references", "external links", "see also", "bibliography", "notes"})


class SectionClass(str, Enum):
    PASSTHROUGH = "PASSTHROUGH"
    SUMMARIZE = "SUMMARIZE"
    SUBSTITUTE_ABSTRACT = "SUBSTITUTE_ABSTRACT"


@dataclass(frozen=True)
class RawSection:
    article_id: str
    article_title: str
    article_abstract: str
    section_id: str
    section_title: str
    text: str
    image_ref: str
    entity_id: str

    def __post_init__(self) -> None:
        if not self.article_id or not self.section_id:
            raise ValueError("article_id and section_id must be non-empty")

    @classmethod
    def from_dict(cls, obj: dict) -> "RawSection":
        if not isinstance(obj, dict):
            raise ValueError("section record must be a JSON object")
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in obj]
        if missing:
            raise ValueError(f"missing fields {missing}")
        values = {n: obj[n] for n in names}
        bad = [n for n, v in values.items() if not isinstance(v, str)]
        if bad:
            raise ValueError(f"fields must be strings: {bad}")
        return cls(**values)


@dataclass(frozen=True)
class KbBuildConfig:
    summary_threshold_tokens: int = 512
    low_info_min_tokens: int = 30
    blocklist_titles: frozenset[str] = field(default=DEFAULT_BLOCKLIST)

    def __post_init__(self) -> None:
        if self.summary_threshold_tokens < 1 or self.low_info_min_tokens < 0:
            raise ValueError("token thresholds out of range")
        if self.summary_threshold_tokens <= self.low_info_min_tokens:
            raise ValueError("summary_threshold_tokens must exceed low_info_min_tokens")
        object.__setattr__(self, "blocklist_titles",
                           frozenset(t.strip().lower() for t in self.blocklist_titles))


@dataclass(frozen=True)
class Diagnostic:
    line: int
    message: str


def classify_section(section: RawSection, cfg: KbBuildConfig) -> SectionClass:
    n_tokens = len(section.text.split())
    if n_tokens < cfg.low_info_min_tokens or section.section_title.strip().lower() in cfg.blocklist_titles:
        return SectionClass.SUBSTITUTE_ABSTRACT
    if n_tokens > cfg.summary_threshold_tokens:
        return SectionClass.SUMMARIZE
    return SectionClass.PASSTHROUGH


def section_text_for(section: RawSection, cfg: KbBuildConfig, gateway: Gateway) -> str:
    kind = classify_section(section, cfg)
    if kind is SectionClass.SUBSTITUTE_ABSTRACT:
        return section.article_abstract
    if kind is SectionClass.SUMMARIZE:
        return gateway.complete(TemplateId.SUMMARIZER, {
            "title": section.article_title,
            "section_title": section.section_title,
            "section_text": section.text,
        })
    return section.text


def parse_sections(lines: Iterable[str]) -> tuple[list[tuple[int, RawSection]], list[Diagnostic]]:
    """Parse JSONL; malformed lines become diagnostics (1-based line numbers) instead of errors."""
    parsed, diagnostics = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            parsed.append((lineno, RawSection.from_dict(json.loads(line))))
        except ValueError as exc:
            diagnostics.append(Diagnostic(lineno, f"malformed section: {exc}"))
    return parsed, diagnostics


def build_kb(lines: Iterable[str], cfg: KbBuildConfig, gateway: Gateway,
             fusion_cfg: FusionConfig, workers: int | None = None) -> tuple[list[KbEntry], list[Diagnostic]]:
    """Turn a JSONL stream of sections into KB entries.

    Output is sorted by ``(article_id, section_id)`` and entry ids are
    assigned in that order, so the result does not depend on worker timing.
    Sections whose gateway calls fail (after the gateway's own retries) are
    skipped with a diagnostic.
    """
    parsed, diagnostics = parse_sections(lines)
    parsed.sort(key=lambda item: (item[1].article_id, item[1].section_id, item[0]))

    def encode(item):
        lineno, section = item
        try:
            text = section_text_for(section, cfg, gateway)
            vector = build_kb_vector(gateway.embed_image(section.image_ref),
                                     gateway.embed_text(text), fusion_cfg)
        except (GatewayError, ValueError) as exc:
            return lineno, section, None, f"skipped: {exc}"
        return lineno, section, (text, vector), None

    n_workers = workers or gateway.config.max_concurrent_requests
    if n_workers > 1 and not gateway.is_stub:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(encode, parsed))
    else:
        results = [encode(item) for item in parsed]

    entries: list[KbEntry] = []
    for lineno, section, payload, problem in results:
        if payload is None:
            log.warning("line %d: %s", lineno, problem)
            diagnostics.append(Diagnostic(lineno, problem))
            continue
        text, vector = payload
        entries.append(KbEntry(
            entry_id=len(entries),
            entity_id=section.entity_id,
            article_id=section.article_id,
            section_id=section.section_id,
            vector=vector,
            section_text=text,
            image_ref=section.image_ref,
        ))
    diagnostics.sort(key=lambda d: d.line)
    return entries, diagnostics


def write_sidecar(entries: Iterable[KbEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.metadata(), ensure_ascii=False, sort_keys=True) + "\n")
