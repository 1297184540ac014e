"""Per-turn finding extraction and diagnosis refinement with batched voting.

The backend proposes SOAP-tagged findings for the newest exchange; candidate
diseases from retrieval are then shown to the backend in randomized batches,
one round per batch group, and a disease survives refinement only when more
than half of the groups select it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kb import KnowledgeBase
from .llm import TemplateCatalog
from .textproc import normalize

SOAP_CATEGORIES = ("Subjective", "Objective", "Assessment", "Plan")

_SOAP_ALIASES = {
    "s": "Subjective",
    "o": "Objective",
    "a": "Assessment",
    "p": "Plan",
    "subjective": "Subjective",
    "objective": "Objective",
    "assessment": "Assessment",
    "plan": "Plan",
}

_FINDING_LINE_RE = re.compile(
    r"^\s*(s|o|a|p|subjective|objective|assessment|plan)\s*:\s*(.+?)\s*$", re.IGNORECASE
)
_SELECTION_LINE_RE = re.compile(
    r"^\s*disease\s*:\s*(\S+)\s*\|\s*explanation\s*:\s*(.*?)\s*$", re.IGNORECASE
)


class ParseError(ValueError):
    """Backend output failed the expected grammar."""


@dataclass(frozen=True)
class Finding:
    text: str
    soap: str
    turn: int

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("finding text must be non-empty")
        if self.soap not in SOAP_CATEGORIES:
            raise ValueError(f"unknown SOAP category {self.soap!r}")
        if self.turn < 1:
            raise ValueError("turn index starts at 1")


@dataclass
class FindingSet:
    turn: int
    findings: list[Finding] = field(default_factory=list)

    def query_text(self) -> str:
        """All findings joined with '; ' in SOAP order, the retrieval query."""
        ordered = []
        for category in SOAP_CATEGORIES:
            ordered.extend(f.text for f in self.findings if f.soap == category)
        return "; ".join(ordered)

    def lines(self) -> str:
        if not self.findings:
            return "none"
        return "\n".join(f"- [{f.soap}] {f.text}" for f in self.findings)


def _conversation_text(prev_doctor: str | None, patient: str) -> str:
    lines = []
    if prev_doctor:
        lines.append(f"Doctor: {prev_doctor}")
    lines.append(f"Patient: {patient}")
    return "\n".join(lines)


def extract_findings(
    backend,
    recent: tuple[str | None, str],
    turn: int,
    catalog: TemplateCatalog,
) -> FindingSet:
    """Ask the backend for SOAP findings over the newest exchange and parse
    them. Unparseable output raises, never returns a silent empty set."""
    prev_doctor, patient = recent
    if not patient or not patient.strip():
        raise ValueError("patient utterance must be non-empty")
    prompt = catalog.get("soap_extract").render(
        conversation=_conversation_text(prev_doctor, patient)
    )
    raw = backend.complete(prompt)
    return parse_findings(raw, turn)


def parse_findings(raw: str, turn: int) -> FindingSet:
    findings: list[Finding] = []
    seen: set[str] = set()
    saw_line = False
    for line in raw.splitlines():
        if not line.strip():
            continue
        saw_line = True
        match = _FINDING_LINE_RE.match(line)
        if not match:
            raise ParseError(f"finding line failed SOAP grammar: {line.strip()!r}")
        category = _SOAP_ALIASES[match.group(1).lower()]
        text = match.group(2)
        key = normalize(text)
        if key in seen:
            continue
        seen.add(key)
        findings.append(Finding(text=text, soap=category, turn=turn))
    if not saw_line:
        raise ParseError("backend returned an empty findings body")
    return FindingSet(turn=turn, findings=findings)


@dataclass(frozen=True)
class BatchGroupPlan:
    """B independent random partitions of the candidate list into batches of
    ``batch_size`` (the last batch of a group may be short)."""

    candidates: tuple[str, ...]
    batch_size: int
    n_groups: int
    seed: int
    groups: tuple[tuple[tuple[str, ...], ...], ...]


def plan_batch_groups(
    candidates: Sequence[str], batch_size: int, n_groups: int, seed: int
) -> BatchGroupPlan:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    ids = tuple(candidates)
    rng = np.random.default_rng(seed)
    groups = []
    for _ in range(n_groups):
        order = [ids[i] for i in rng.permutation(len(ids))]
        batches = tuple(
            tuple(order[start : start + batch_size]) for start in range(0, len(order), batch_size)
        )
        groups.append(batches)
    return BatchGroupPlan(
        candidates=ids,
        batch_size=batch_size,
        n_groups=n_groups,
        seed=seed,
        groups=tuple(groups),
    )


@dataclass
class VoteTally:
    votes: dict[str, int]
    n_groups: int


@dataclass
class RefinedList:
    """Candidates whose vote strictly exceeds half the group count, in the
    original candidate (retrieval) order."""

    diseases: tuple[str, ...]


@dataclass
class RefinementResult:
    tally: VoteTally
    refined: RefinedList
    explanations: dict[str, list[str]]
    per_batch_selections: list[list[list[str]]]
    discarded: list[dict]
    plan_seed: int
    batch_size: int

    def to_trace_dict(self) -> dict:
        return {
            "plan_seed": self.plan_seed,
            "B": self.tally.n_groups,
            "G": self.batch_size,
            "per_batch_selections": self.per_batch_selections,
            "votes": dict(sorted(self.tally.votes.items())),
            "refined": list(self.refined.diseases),
        }


def parse_selections(raw: str) -> list[tuple[str, str]]:
    """Parse `disease: <id> | explanation: ...` lines; `none` means empty."""
    selections: list[tuple[str, str]] = []
    lines = [line for line in raw.splitlines() if line.strip()]
    if len(lines) == 1 and lines[0].strip().lower() == "none":
        return []
    for line in lines:
        match = _SELECTION_LINE_RE.match(line)
        if not match:
            raise ParseError(f"selection line failed grammar: {line.strip()!r}")
        selections.append((match.group(1), match.group(2)))
    return selections


def _candidate_lines(kb: KnowledgeBase, batch: Sequence[str]) -> str:
    lines = []
    for doc_id in batch:
        doc = kb.require(doc_id)
        lines.append(f"- id: {doc.id} | name: {doc.name} | knowledge: {doc.diagnosis_knowledge}")
    return "\n".join(lines)


def _past_findings_text(past: Sequence[Finding], char_budget: int) -> str:
    if not past:
        return "none"
    lines = [f"- [{f.soap}] {f.text} (turn {f.turn})" for f in past]
    text = "\n".join(lines)
    if len(text) > char_budget:
        text = text[-char_budget:]
        text = text[text.index("\n") + 1 :] if "\n" in text else text
    return text


def refine(
    backend,
    findings: FindingSet,
    past_findings: Sequence[Finding],
    plan: BatchGroupPlan,
    kb: KnowledgeBase,
    catalog: TemplateCatalog,
    past_char_budget: int = 4000,
) -> RefinementResult:
    """Run every batch of every group through the backend and tally votes.

    A group's selection is the union of its batches' selections; v(e) counts
    the groups whose union contains e, and the refined list keeps candidates
    with v(e) > n_groups / 2 (strictly).
    """
    for doc_id in plan.candidates:
        kb.require(doc_id)
    template = catalog.get("abductive_refine")
    findings_text = findings.lines()
    past_text = _past_findings_text(past_findings, past_char_budget)

    votes = {doc_id: 0 for doc_id in plan.candidates}
    explanations: dict[str, list[str]] = {}
    per_batch: list[list[list[str]]] = []
    discarded: list[dict] = []

    for g_index, group in enumerate(plan.groups):
        group_selected: set[str] = set()
        group_batches: list[list[str]] = []
        for b_index, batch in enumerate(group):
            prompt = template.render(
                findings=findings_text,
                past_findings=past_text,
                candidates=_candidate_lines(kb, batch),
            )
            raw = backend.complete(prompt)
            kept: list[str] = []
            for doc_id, explanation in parse_selections(raw):
                if doc_id not in batch:
                    discarded.append({"group": g_index, "batch": b_index, "id": doc_id})
                    continue
                kept.append(doc_id)
                if explanation:
                    explanations.setdefault(doc_id, []).append(explanation)
            group_batches.append(kept)
            group_selected.update(kept)
        per_batch.append(group_batches)
        for doc_id in group_selected:
            votes[doc_id] += 1

    threshold = plan.n_groups / 2.0
    refined = tuple(doc_id for doc_id in plan.candidates if votes[doc_id] > threshold)
    return RefinementResult(
        tally=VoteTally(votes=votes, n_groups=plan.n_groups),
        refined=RefinedList(diseases=refined),
        explanations=explanations,
        per_batch_selections=per_batch,
        discarded=discarded,
        plan_seed=plan.seed,
        batch_size=plan.batch_size,
    )
