"""Corpus construction: dual-prompt disease annotation, two-step disease
linking, thought extraction, and corpus statistics.

Each dialogue turn is annotated twice: once from the history alone and once
with the doctor's actual response in view. Free-text disease mentions are
linked to the knowledge base by coarse retrieval (top 10) followed by a
backend-confirmed match, and the two linked lists are merged with
provenance flags.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .abductive import ParseError
from .alignment import ThoughtProcess, parse_thought
from .dialogue import Dialogue, DialogueHistory
from .encoder import EncoderModel
from .kb import KnowledgeBase
from .llm import BackendError, TemplateCatalog
from .retrieval import Retriever
from .textproc import normalize, word_tokens

COARSE_TOP_N = 10

_MENTION_LINE_RE = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*(?:\|\s*reason\s*:\s*(.*?)\s*)?$")


@dataclass(frozen=True)
class Mention:
    text: str
    rank: int
    rationale: str = ""


def parse_mentions(raw: str) -> list[Mention]:
    """Ranked `N. <name> | reason: ...` lines; duplicates keep the first rank."""
    mentions: list[Mention] = []
    seen: set[str] = set()
    for line in raw.splitlines():
        if not line.strip():
            continue
        match = _MENTION_LINE_RE.match(line)
        if not match:
            raise ParseError(f"mention line failed grammar: {line.strip()!r}")
        text = match.group(2)
        key = normalize(text)
        if key in seen:
            continue
        seen.add(key)
        mentions.append(Mention(text=text, rank=len(mentions) + 1, rationale=match.group(3) or ""))
    if not mentions:
        raise ParseError("backend returned no disease mentions")
    return mentions


def annotate_pri(backend, history: DialogueHistory, catalog: TemplateCatalog) -> list[Mention]:
    """Diseases inferred from the conversation alone, ranked by possibility."""
    if not history.utterances:
        raise ValueError("history must be non-empty")
    prompt = catalog.get("annotate_pri").render(history=history.as_text())
    return parse_mentions(backend.complete(prompt))


def annotate_post(
    backend, history: DialogueHistory, response: str, catalog: TemplateCatalog
) -> list[Mention]:
    """Diseases the doctor is considering or ruling out, inferred with the
    actual response in view."""
    if not history.utterances:
        raise ValueError("history must be non-empty")
    prompt = catalog.get("annotate_post").render(history=history.as_text(), response=response)
    return parse_mentions(backend.complete(prompt))


@dataclass
class LinkResult:
    disease_id: str | None
    reason: str
    candidates: list[str] = field(default_factory=list)
    extras: list[str] = field(default_factory=list)

    @property
    def linked(self) -> bool:
        return self.disease_id is not None


def link(
    mention: str,
    model: EncoderModel,
    kb: KnowledgeBase,
    backend,
    catalog: TemplateCatalog,
    retriever: Retriever | None = None,
) -> LinkResult:
    """Two-step linking: coarse top-10 retrieval over the KB, then the
    backend picks the matching candidate (or none). A pick outside the
    coarse list is discarded; backend failure degrades to unlinked."""
    if not mention or not mention.strip():
        raise ValueError("mention must be non-empty")
    retriever = retriever or Retriever(model, kb)
    coarse = retriever.top_k(mention, COARSE_TOP_N)
    candidate_ids = coarse.ids()
    if not candidate_ids:
        return LinkResult(None, "empty knowledge base")
    lines = []
    for doc_id in candidate_ids:
        doc = kb.require(doc_id)
        alias_part = f" | aliases: {', '.join(doc.aliases)}" if doc.aliases else ""
        lines.append(f"- id: {doc.id} | name: {doc.name}{alias_part}")
    prompt = catalog.get("disease_match").render(mention=mention, candidates="\n".join(lines))
    try:
        raw = backend.complete(prompt)
    except BackendError as exc:
        return LinkResult(None, f"backend failure: {exc}", candidates=candidate_ids)

    answers = [line.strip() for line in raw.splitlines() if line.strip()]
    if not answers or answers[0].lower() == "none":
        return LinkResult(None, "no match confirmed", candidates=candidate_ids)
    in_list = [a for a in answers if a in candidate_ids]
    if not in_list:
        return LinkResult(None, "selection outside candidate list", candidates=candidate_ids)
    return LinkResult(in_list[0], "matched", candidates=candidate_ids, extras=in_list[1:])


def extract_thought(
    backend,
    history: DialogueHistory,
    gold_response: str,
    exemplars: Sequence[str],
    catalog: TemplateCatalog,
) -> ThoughtProcess:
    """Annotation-time thought extraction: reconstruct the numbered reasoning
    that leads to the doctor's actual response."""
    if not gold_response or not gold_response.strip():
        raise ValueError("gold response must be non-empty")
    target = (
        f'The doctor actually responded: "{gold_response}"\n'
        "Reconstruct the numbered thought process that leads to exactly this response, "
        "and end with the marker line quoting it verbatim."
    )
    prompt = catalog.get("thought_cot").render(
        exemplars="\n\n".join(exemplars),
        history=history.as_text(),
        memory="none recorded",
        diseases="none listed",
        target=target,
    )
    return parse_thought(backend.complete(prompt))


@dataclass
class TurnDiseaseAnnotation:
    """Per-turn disease lists: inferred without and with the doctor's
    response, merged with provenance (post ranks first, then pri remainder)."""

    turn: int
    e_pri: list[str]
    e_post: list[str]
    e_merged: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.e_merged:
            self.e_merged = merge_disease_lists(self.e_pri, self.e_post)

    def merged_ids(self) -> list[str]:
        return [m["id"] for m in self.e_merged]


def merge_disease_lists(e_pri: Sequence[str], e_post: Sequence[str]) -> list[dict]:
    pri_set, post_set = set(e_pri), set(e_post)
    merged = []
    for doc_id in e_post:
        merged.append({"id": doc_id, "provenance": "both" if doc_id in pri_set else "post"})
    for doc_id in e_pri:
        if doc_id not in post_set:
            merged.append({"id": doc_id, "provenance": "pri"})
    return merged


def link_mentions(
    mentions: Sequence[Mention],
    model: EncoderModel,
    kb: KnowledgeBase,
    backend,
    catalog: TemplateCatalog,
    retriever: Retriever | None = None,
) -> list[str]:
    """Link each mention in rank order; unlinked mentions drop out and
    duplicate link targets keep their first rank."""
    retriever = retriever or Retriever(model, kb)
    linked: list[str] = []
    for mention in mentions:
        result = link(mention.text, model, kb, backend, catalog, retriever=retriever)
        if result.linked and result.disease_id not in linked:
            linked.append(result.disease_id)
    return linked


def annotate_dialogue(
    dialogue: Dialogue,
    model: EncoderModel,
    kb: KnowledgeBase,
    backend,
    catalog: TemplateCatalog,
    exemplars: Sequence[str],
) -> list[dict]:
    """Run the full annotation pipeline over every turn of one dialogue,
    yielding corpus records {dialogue_id, turn, e_pri, e_post, e_merged,
    thought}."""
    retriever = Retriever(model, kb)
    records = []
    for index, turn in enumerate(dialogue.turns):
        history = dialogue.history_before(index)
        pri = link_mentions(
            annotate_pri(backend, history, catalog), model, kb, backend, catalog, retriever
        )
        post = link_mentions(
            annotate_post(backend, history, turn.doctor, catalog),
            model,
            kb,
            backend,
            catalog,
            retriever,
        )
        annotation = TurnDiseaseAnnotation(turn=index + 1, e_pri=pri, e_post=post)
        thought = extract_thought(backend, history, turn.doctor, exemplars, catalog)
        records.append(
            {
                "dialogue_id": dialogue.id,
                "turn": index + 1,
                "e_pri": annotation.e_pri,
                "e_post": annotation.e_post,
                "e_merged": annotation.e_merged,
                "thought": thought.to_dict(),
            }
        )
    return records


@dataclass
class CorpusStats:
    n_thoughts: int
    avg_steps: float
    avg_tokens_per_step: float
    avg_total_tokens: float


def stats(thoughts: Iterable[ThoughtProcess]) -> CorpusStats:
    """Averages over a thought corpus; tokens come from the shared
    whitespace+punctuation word tokenizer."""
    n = 0
    total_steps = 0
    total_tokens = 0
    for thought in thoughts:
        n += 1
        total_steps += len(thought.steps)
        total_tokens += sum(len(word_tokens(step)) for step in thought.steps)
    if n == 0:
        return CorpusStats(0, 0.0, 0.0, 0.0)
    return CorpusStats(
        n_thoughts=n,
        avg_steps=total_steps / n,
        avg_tokens_per_step=(total_tokens / total_steps) if total_steps else 0.0,
        avg_total_tokens=total_tokens / n,
    )


def write_corpus_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
