"""Relate new findings to refined diseases and accumulate diagnosis memory.

Each (finding, disease) pair is classified as support, oppose, or irrelevant;
the tagged entries form an append-only per-session memory consumed by the
thought prompt.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .abductive import Finding, FindingSet, ParseError, RefinedList
from .kb import KnowledgeBase
from .llm import TemplateCatalog
from .textproc import normalize

STATUSES = ("support", "oppose", "irrelevant")

_RELATION_LINE_RE = re.compile(
    r"^\s*finding\s*:\s*(.+?)\s*\|\s*disease\s*:\s*(\S+)\s*\|\s*status\s*:\s*(\S+)"
    r"\s*\|\s*rationale\s*:\s*(.*?)\s*$",
    re.IGNORECASE,
)

UNADDRESSED_RATIONALE = "unaddressed"


@dataclass(frozen=True)
class RelationEntry:
    finding: Finding
    disease: str
    status: str
    rationale: str
    turn: int

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    def to_record(self) -> dict:
        return {
            "finding": self.finding.text,
            "soap": self.finding.soap,
            "disease": self.disease,
            "status": self.status,
            "rationale": self.rationale,
            "turn": self.turn,
        }

    @classmethod
    def from_record(cls, record: dict) -> "RelationEntry":
        return cls(
            finding=Finding(text=record["finding"], soap=record["soap"], turn=record["turn"]),
            disease=record["disease"],
            status=record["status"],
            rationale=record["rationale"],
            turn=record["turn"],
        )


class DiagnosisMemory:
    """Append-only (finding, disease, status) entries, non-decreasing turns."""

    def __init__(self, entries: Iterable[RelationEntry] = ()):
        self._entries: list[RelationEntry] = []
        for entry in entries:
            self._check_turn(entry)
            self._entries.append(entry)

    def _check_turn(self, entry: RelationEntry) -> None:
        if self._entries and entry.turn < self._entries[-1].turn:
            raise ValueError(
                f"turn regression: appending turn {entry.turn} after {self._entries[-1].turn}"
            )

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def entries(self) -> tuple[RelationEntry, ...]:
        return tuple(self._entries)

    def append(self, entries: Sequence[RelationEntry]) -> "DiagnosisMemory":
        for entry in entries:
            self._check_turn(entry)
            self._entries.append(entry)
        return self

    def copy(self) -> "DiagnosisMemory":
        return DiagnosisMemory(self._entries)

    def for_diseases(self, disease_ids: Sequence[str]) -> list[RelationEntry]:
        wanted = set(disease_ids)
        return [e for e in self._entries if e.disease in wanted]

    def digest(self, names: dict[str, str] | None = None) -> str:
        """Compact rendering for prompts; 'none recorded' when empty."""
        if not self._entries:
            return "none recorded"
        names = names or {}
        lines = []
        for e in self._entries:
            label = names.get(e.disease, e.disease)
            lines.append(f"- turn {e.turn}: {e.finding.text} {e.status}s {label} ({e.rationale})")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e.to_record(), ensure_ascii=False) for e in self._entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "DiagnosisMemory":
        entries = [
            RelationEntry.from_record(json.loads(line))
            for line in text.splitlines()
            if line.strip()
        ]
        return cls(entries)


def parse_relations(raw: str, findings: FindingSet, diseases: Sequence[str]) -> list[RelationEntry]:
    """Parse tagged relation lines; unknown status tokens are an error, and
    pairs the backend omitted default to irrelevant/unaddressed."""
    by_norm = {normalize(f.text): f for f in findings.findings}
    parsed: dict[tuple[str, str], RelationEntry] = {}
    for line in raw.splitlines():
        if not line.strip():
            continue
        match = _RELATION_LINE_RE.match(line)
        if not match:
            raise ParseError(f"relation line failed grammar: {line.strip()!r}")
        finding_text, disease, status, rationale = match.groups()
        status = status.lower()
        if status not in STATUSES:
            raise ParseError(f"unknown status {status!r}")
        finding = by_norm.get(normalize(finding_text))
        if finding is None or disease not in diseases:
            continue  # hallucinated pair: not one of ours, drop it
        key = (normalize(finding.text), disease)
        if key not in parsed:
            parsed[key] = RelationEntry(
                finding=finding,
                disease=disease,
                status=status,
                rationale=rationale,
                turn=findings.turn,
            )

    entries: list[RelationEntry] = []
    for finding in findings.findings:
        for disease in diseases:
            key = (normalize(finding.text), disease)
            entry = parsed.get(key)
            if entry is None:
                entry = RelationEntry(
                    finding=finding,
                    disease=disease,
                    status="irrelevant",
                    rationale=UNADDRESSED_RATIONALE,
                    turn=findings.turn,
                )
            entries.append(entry)
    return entries


def analyze(
    backend,
    findings: FindingSet,
    refined: RefinedList,
    kb: KnowledgeBase,
    catalog: TemplateCatalog,
) -> list[RelationEntry]:
    """Classify every (new finding, refined disease) pair. An empty refined
    list short-circuits to no entries without calling the backend."""
    if not refined.diseases or not findings.findings:
        return []
    disease_lines = []
    for doc_id in refined.diseases:
        doc = kb.require(doc_id)
        disease_lines.append(
            f"- id: {doc.id} | name: {doc.name} | knowledge: {doc.diagnosis_knowledge}"
        )
    prompt = catalog.get("deductive_analyze").render(
        findings=findings.lines(),
        diseases="\n".join(disease_lines),
    )
    raw = backend.complete(prompt)
    return parse_relations(raw, findings, refined.diseases)
