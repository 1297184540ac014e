"""Generation-quality metrics: BLEU-1/2/4, ROUGE-1/2, Entity-F1.

The tokenizer is pinned and its id recorded in every report, since metric
values are only comparable under one tokenization. BLEU uses clipped n-gram
precision with a brevity penalty and no smoothing by default; ROUGE is the
n-gram recall variant; Entity-F1 is a set F1 over entities canonicalized
against the knowledge-base lexicon by longest match.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .kb import KnowledgeBase
from .textproc import TOKENIZER_ID, word_tokens


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyp: str, ref: str, max_n: int = 4, smooth: bool = False) -> float:
    """Geometric mean of clipped n-gram precisions up to ``max_n`` times the
    brevity penalty. Without smoothing any zero precision gives 0; with
    smoothing, zero counts are floored at 1e-9."""
    ref_tokens = word_tokens(ref)
    if not ref_tokens:
        raise ValueError("reference must be non-empty")
    hyp_tokens = word_tokens(hyp)
    if not hyp_tokens:
        return 0.0

    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = ngram_counts(hyp_tokens, n)
        total = sum(hyp_counts.values())
        if total == 0:
            if not smooth:
                return 0.0
            precision = 1e-9
        else:
            ref_counts = ngram_counts(ref_tokens, n)
            clipped = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
            if clipped == 0 and not smooth:
                return 0.0
            precision = max(clipped, 1e-9 if smooth else 0) / total
        log_sum += math.log(precision)

    c, r = len(hyp_tokens), len(ref_tokens)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum / max_n)


def rouge_n(hyp: str, ref: str, n: int) -> float:
    """Clipped n-gram recall: matched reference n-grams over total reference
    n-grams."""
    ref_tokens = word_tokens(ref)
    if len(ref_tokens) < n:
        raise ValueError(f"reference has fewer than {n} tokens")
    ref_counts = ngram_counts(ref_tokens, n)
    hyp_counts = ngram_counts(word_tokens(hyp), n)
    matched = sum(min(count, hyp_counts[gram]) for gram, count in ref_counts.items())
    return matched / sum(ref_counts.values())


def entity_f1(pred_entities: set[str], gold_entities: set[str]) -> float:
    """Set F1; two empty sets agree perfectly, exactly one empty scores 0."""
    if not pred_entities and not gold_entities:
        return 1.0
    if not pred_entities or not gold_entities:
        return 0.0
    overlap = len(pred_entities & gold_entities)
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_entities)
    recall = overlap / len(gold_entities)
    return 2 * precision * recall / (precision + recall)


class EntityLexicon:
    """Name+alias lexicon mapping token phrases to disease ids; extraction is
    greedy longest-match over normalized tokens."""

    def __init__(self, phrases: dict[str, str]):
        # token-tuple -> id
        self._phrases: dict[tuple[str, ...], str] = {}
        for phrase, doc_id in phrases.items():
            tokens = tuple(word_tokens(phrase))
            if tokens:
                self._phrases[tokens] = doc_id
        self._max_len = max((len(t) for t in self._phrases), default=0)

    @classmethod
    def from_kb(cls, kb: KnowledgeBase) -> "EntityLexicon":
        phrases: dict[str, str] = {}
        for doc in kb:
            phrases.setdefault(doc.name, doc.id)
            for alias in doc.aliases:
                phrases.setdefault(alias, doc.id)
        return cls(phrases)

    def extract(self, text: str) -> set[str]:
        tokens = word_tokens(text)
        found: set[str] = set()
        i = 0
        while i < len(tokens):
            matched = 0
            for length in range(min(self._max_len, len(tokens) - i), 0, -1):
                doc_id = self._phrases.get(tuple(tokens[i : i + length]))
                if doc_id is not None:
                    found.add(doc_id)
                    matched = length
                    break
            i += matched if matched else 1
        return found

    def digest(self) -> str:
        h = hashlib.sha256()
        for tokens in sorted(self._phrases):
            h.update("\x1f".join(tokens).encode("utf-8"))
            h.update(self._phrases[tokens].encode("utf-8"))
        return h.hexdigest()[:16]


@dataclass
class EvalReport:
    """Corpus-averaged metrics with the tokenizer and lexicon pinned."""

    scores: dict[str, float]
    n_turns: int
    tokenizer_id: str
    lexicon_digest: str

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "n_turns": self.n_turns,
            "tokenizer_id": self.tokenizer_id,
            "lexicon_digest": self.lexicon_digest,
        }


def evaluate_run(
    outputs: Sequence[str],
    gold: Sequence[str],
    lexicon: EntityLexicon,
) -> EvalReport:
    """Per-turn metrics averaged over aligned (output, gold) turn pairs."""
    if len(outputs) != len(gold):
        raise ValueError(f"misaligned turn counts: {len(outputs)} outputs vs {len(gold)} gold")
    sums = {"B-1": 0.0, "B-4": 0.0, "R-1": 0.0, "R-2": 0.0, "E-F": 0.0}
    for hyp, ref in zip(outputs, gold):
        sums["B-1"] += bleu(hyp, ref, max_n=1)
        sums["B-4"] += bleu(hyp, ref, max_n=4)
        sums["R-1"] += rouge_n(hyp, ref, 1)
        sums["R-2"] += rouge_n(hyp, ref, 2) if len(word_tokens(ref)) >= 2 else 0.0
        sums["E-F"] += entity_f1(lexicon.extract(hyp), lexicon.extract(ref))
    n = max(len(outputs), 1)
    return EvalReport(
        scores={key: value / n for key, value in sums.items()},
        n_turns=len(outputs),
        tokenizer_id=TOKENIZER_ID,
        lexicon_digest=lexicon.digest(),
    )
