"""Top-K disease retrieval over the knowledge base and recall@K evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EncoderModel
from .kb import KnowledgeBase


@dataclass
class RetrievalResult:
    """Candidates as (disease id, score), non-increasing score, ties by id."""

    candidates: list[tuple[str, float]]
    k: int

    def ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.candidates]


class Retriever:
    """Read-only search index: document embeddings are computed once, so
    repeated queries cost one query embedding plus a matrix product."""

    def __init__(self, model: EncoderModel, kb: KnowledgeBase):
        self.model = model
        self.kb = kb
        self._ids = kb.ids()
        if self._ids:
            self._doc_matrix = np.stack([model.embed(kb.require(i).full_text()) for i in self._ids])
        else:
            self._doc_matrix = np.zeros((0, model.dim_out))

    def scores(self, query: str) -> dict[str, float]:
        if not self._ids:
            return {}
        values = self._doc_matrix @ self.model.embed(query)
        return {doc_id: float(v) for doc_id, v in zip(self._ids, values)}

    def top_k(self, query: str, k: int) -> RetrievalResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        scored = sorted(self.scores(query).items(), key=lambda item: (-item[1], item[0]))
        return RetrievalResult(candidates=scored[:k], k=k)


def retrieve_top_k(model: EncoderModel, kb: KnowledgeBase, query: str, k: int) -> RetrievalResult:
    """One-shot variant; build a Retriever directly when issuing many queries."""
    return Retriever(model, kb).top_k(query, k)


@dataclass
class RecallTable:
    """recall@K per K, as fractions in [0, 1]."""

    recall: dict[int, float]
    n_pairs: int
    mode: str

    def as_percent(self) -> dict[int, float]:
        return {k: 100.0 * v for k, v in self.recall.items()}


def recall_at_k(
    model: EncoderModel,
    kb: KnowledgeBase,
    eval_set: Sequence[tuple[str, Sequence[str]]],
    ks: Sequence[int],
    mode: str = "micro",
) -> RecallTable:
    """Recall of gold diseases within the top-K retrieved, for each K.

    ``micro`` averages over (query, gold id) pairs; ``per-turn`` averages the
    per-query hit fraction. Unknown gold ids are an error.
    """
    if mode not in ("micro", "per-turn"):
        raise ValueError(f"unknown recall mode {mode!r}")
    for _, gold in eval_set:
        for doc_id in gold:
            if doc_id not in kb:
                raise ValueError(f"gold disease id {doc_id!r} not in knowledge base")

    retriever = Retriever(model, kb)
    max_k = max(ks) if ks else 0
    hits = {k: 0.0 for k in ks}
    denom = 0.0
    for query, gold in eval_set:
        if not gold:
            continue
        top_ids = retriever.top_k(query, max_k).ids() if max_k else []
        positions = {doc_id: rank for rank, doc_id in enumerate(top_ids, start=1)}
        denom += len(gold) if mode == "micro" else 1.0
        for k in ks:
            found = sum(1 for g in gold if positions.get(g, max_k + 1) <= k)
            hits[k] += found if mode == "micro" else found / len(gold)
    recall = {k: (hits[k] / denom if denom else 0.0) for k in ks}
    return RecallTable(recall=recall, n_pairs=int(denom), mode=mode)
