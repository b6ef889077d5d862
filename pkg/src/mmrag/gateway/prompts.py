"""Prompt templates for every model role in the pipeline.

Placeholders are ``{Name}`` tokens in the user text; rendering is a single
literal pass, so braces inside substituted values are never re-expanded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class TemplateId(str, Enum):
    REFINER = "REFINER"
    INSPECTOR = "INSPECTOR"
    GENERATOR_EVQA = "GENERATOR_EVQA"
    GENERATOR_INFOSEEK = "GENERATOR_INFOSEEK"
    SUMMARIZER = "SUMMARIZER"
    ANSWER_EXPANSION = "ANSWER_EXPANSION"
    CAPTION_EXPANSION = "CAPTION_EXPANSION"


_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    system_text: str
    user_text: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for name in _PLACEHOLDER.findall(self.user_text):
            seen.setdefault(name)
        return tuple(seen)


class PromptError(ValueError):
    pass


_REFINER_SYSTEM = (
    "You are an expert in generating queries for encyclopedic retrieval. You first think about "
    "the reasoning process in the mind and then provide the user with the answer. Given a question "
    "about the given image <image>, your task is to retain the original query while expanding it "
    "with additional relevant information derived from both the visual content and world knowledge, "
    "to retrieve documents that best answer the question.\n"
    "\n"
    "Show your work in <think> </think> tags. Your final response must be in JSON format within "
    "<answer> </answer> tags. For example,\n"
    "<answer>\n"
    "{\n"
    '    "query": "...."\n'
    "}\n"
    "</answer>."
)

_INSPECTOR_SYSTEM = (
    "You are an assistant to determine the consistency and completeness of the provided context in "
    "relation to a question and an image <image>. You will receive a question and a retrieved "
    "context. Follow these steps:\n"
    "1. Check if the context is consistent with both the image and the question.\n"
    "2. Determine if the context contains the answer to the question.\n"
    "\n"
    "If both conditions are satisfied, respond with:\n"
    "{\n"
    '    "pass": "true"\n'
    "}\n"
    "If either condition is not satisfied, respond with:\n"
    "{\n"
    '    "pass": "false",\n'
    '    "answer": "predicted answer"\n'
    "}\n"
    "Be concise and ensure your responses are in JSON format."
)

_GENERATOR_EVQA_SYSTEM = (
    "You are a helpful assistant for answering encyclopedic questions. If the context does not "
    "contain the information required to answer the question, you should answer the question using "
    "internal model knowledge."
)

_GENERATOR_INFOSEEK_SYSTEM = (
    "You are a helpful assistant for answering encyclopedic questions. Do not answer anything else. "
    "If you need to answer questions about numbers or time, please output the corresponding "
    "numerical format directly. If the context does not contain the information required to answer "
    "the question, you should answer the question using internal model knowledge."
)

_ANSWER_EXPANSION_SYSTEM = (
    "Given a question and its short answer, expand the answer into a complete sentence while "
    "keeping the original answer intact. Expand the answer into a natural, complete sentence that "
    "includes the original answer.\n"
    "\n"
    "Return your response in JSON format. Output format:\n"
    "{\n"
    '    "expanded_answer": "your expanded sentence here"\n'
    "}"
)

_CAPTION_EXPANSION_SYSTEM = (
    "You are an expert in generating queries for encyclopedic retrieval. Given a question about the "
    "given image, you should:\n"
    "1. Concisely caption the image which is most relevant to the question.\n"
    "2. Retain the original query while expanding it with additional relevant information derived "
    "from both the visual content and world knowledge, to retrieve documents that best answer the "
    "question.\n"
    "\n"
    "Your final response must be in JSON format. For example:\n"
    "{\n"
    '    "caption": "...",\n'
    '    "query": "..."\n'
    "}"
)

TEMPLATES: dict[TemplateId, PromptTemplate] = {
    t.template_id: t
    for t in (
        PromptTemplate(
            TemplateId.REFINER,
            _REFINER_SYSTEM,
            "Here's the user query: {Query}\nAssistant: Let me think step by step. <think>",
        ),
        PromptTemplate(
            TemplateId.INSPECTOR,
            _INSPECTOR_SYSTEM,
            "Question: {Query}\nRetrieved Context: {Context}",
        ),
        PromptTemplate(
            TemplateId.GENERATOR_EVQA,
            _GENERATOR_EVQA_SYSTEM,
            "Context: {Context}\nQuestion: {Question}\nThe answer is:",
        ),
        PromptTemplate(
            TemplateId.GENERATOR_INFOSEEK,
            _GENERATOR_INFOSEEK_SYSTEM,
            "Context: {Context}\nQuestion: {Question}\n"
            "Just answer the questions , no explanations needed. Short answer is:",
        ),
        PromptTemplate(
            TemplateId.SUMMARIZER,
            "Summarize the following Wikipedia section concisely while preserving key information.",
            "Article: {title}\nSection: {section_title}\nContent: {section_text}\n"
            "Provide a concise summary:",
        ),
        PromptTemplate(
            TemplateId.ANSWER_EXPANSION,
            _ANSWER_EXPANSION_SYSTEM,
            "Question: {question}\nOriginal Answer: {original_answer}",
        ),
        PromptTemplate(
            TemplateId.CAPTION_EXPANSION,
            _CAPTION_EXPANSION_SYSTEM,
            "Here's the user query: {query}",
        ),
    )
}


def get_template(template_id) -> PromptTemplate:
    try:
        return TEMPLATES[TemplateId(template_id)]
    except ValueError:
        raise PromptError(f"unknown template {template_id!r}") from None


def render_prompt(template_id, variables: dict[str, str]) -> tuple[str, str]:
    """Return ``(system_text, user_text)`` with every placeholder substituted."""
    template = get_template(template_id)
    expected = set(template.placeholders)
    missing = expected - variables.keys()
    if missing:
        raise PromptError(f"{template.template_id.value}: missing variables {sorted(missing)}")
    extra = variables.keys() - expected
    if extra:
        raise PromptError(f"{template.template_id.value}: unknown variables {sorted(extra)}")
    user = _PLACEHOLDER.sub(lambda m: str(variables[m.group(1)]), template.user_text)
    return template.system_text, user


def identify_template(system_text: str) -> TemplateId | None:
    for template in TEMPLATES.values():
        if template.system_text == system_text:
            return template.template_id
    return None
