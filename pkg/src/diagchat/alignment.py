"""Preference re-ranking of refined diseases and thought-grounded responses.

The ranker scores each refined disease against the dialogue history; the top
slice of the re-ranked list, together with the diagnosis memory, grounds a
numbered thought process from which the doctor's reply is extracted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .abductive import ParseError, RefinedList
from .deductive import DiagnosisMemory
from .dialogue import DialogueHistory
from .encoder import RankerModel
from .kb import KnowledgeBase
from .llm import PromptTemplate

RESPONSE_MARKER = "Therefore, the doctor responds"
DEFAULT_TOP_K = 5

_STEP_RE = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")


@dataclass
class PriorityRanking:
    """Refined diseases re-ordered by ranker score (ties by ascending id)."""

    ranked: list[tuple[str, float]]
    k_cut: int = DEFAULT_TOP_K

    def top(self) -> list[tuple[str, float]]:
        return self.ranked[: self.k_cut]

    def top_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.top()]


def rank(
    ranker: RankerModel,
    history: DialogueHistory,
    refined: RefinedList,
    kb: KnowledgeBase,
    k_cut: int = DEFAULT_TOP_K,
) -> PriorityRanking:
    if not refined.diseases:
        raise ValueError("refined list must be non-empty")
    history_text = history.as_text()
    scored = []
    for doc_id in refined.diseases:
        doc = kb.require(doc_id)
        scored.append((doc_id, ranker.score(history_text, doc.name)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return PriorityRanking(ranked=scored, k_cut=k_cut)


@dataclass
class ThoughtProcess:
    """Numbered reasoning steps plus the extracted doctor response."""

    steps: list[str]
    response: str
    raw: str

    def to_dict(self) -> dict:
        return {"steps": list(self.steps), "response": self.response}

    def to_text(self) -> str:
        """Canonical textual form; parse_thought() round-trips it."""
        numbered = "\n".join(f"{i}. {step}" for i, step in enumerate(self.steps, start=1))
        return f'{numbered}\n{RESPONSE_MARKER}, "{self.response}"'


def parse_thought(raw: str) -> ThoughtProcess:
    """Parse numbered steps and the quoted response after the marker phrase.

    The last marker occurrence wins. The response is the text inside the
    quotes following the marker; without quotes, the remainder of the marker
    line is taken. Missing marker or zero steps is an error.
    """
    marker_at = raw.rfind(RESPONSE_MARKER)
    if marker_at < 0:
        raise ParseError(f"thought output lacks the marker {RESPONSE_MARKER!r}")
    head, tail = raw[:marker_at], raw[marker_at + len(RESPONSE_MARKER) :]

    steps = [m.group(2) for line in head.splitlines() if (m := _STEP_RE.match(line))]
    if not steps:
        raise ParseError("thought output has zero parsable numbered steps")

    quoted = re.search(r"[\"“](.*?)[\"”\"]", tail, re.DOTALL)
    if quoted and quoted.group(1).strip():
        response = quoted.group(1).strip()
    else:
        response = tail.strip().lstrip(",:").strip()
    if not response:
        raise ParseError("empty response after the marker phrase")
    return ThoughtProcess(steps=steps, response=response, raw=raw)


def build_thought_prompt(
    history: DialogueHistory,
    memory: DiagnosisMemory,
    top: Sequence[tuple[str, float]],
    exemplars: Sequence[str],
    template: PromptTemplate,
    names: dict[str, str] | None = None,
    target: str = "",
) -> str:
    """Assemble the thought prompt: exemplars, history, memory digest, then
    the top-ranked diseases with their recorded analyses. Byte-deterministic
    for fixed inputs."""
    names = names or {}
    top_ids = [doc_id for doc_id, _ in top]
    analyses = memory.for_diseases(top_ids)
    disease_lines = []
    for doc_id, score in top:
        label = names.get(doc_id, doc_id)
        related = [e for e in analyses if e.disease == doc_id]
        if related:
            notes = "; ".join(f"{e.finding.text}: {e.status}" for e in related)
        else:
            notes = "no recorded analysis"
        disease_lines.append(f"- {label} (score {score:.4f}) | {notes}")
    return template.render(
        exemplars="\n\n".join(exemplars),
        history=history.as_text(),
        memory=memory.digest(names),
        diseases="\n".join(disease_lines) if disease_lines else "none listed",
        target=target,
    )


def generate_thought(backend, prompt: str) -> ThoughtProcess:
    return parse_thought(backend.complete(prompt))


def iou(predicted: set[str], gold: set[str]) -> float:
    """Intersection over union of two disease-id sets; two empty sets count
    as full agreement (1.0)."""
    if not predicted and not gold:
        return 1.0
    union = predicted | gold
    return len(predicted & gold) / len(union)
