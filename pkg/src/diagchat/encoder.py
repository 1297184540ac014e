"""Text embedding and the two trainable scorers.

The encoder is a desk-scale stand-in for a pretrained transformer: word
unigrams plus character 3..5-grams are hashed into a wide feature space,
TF-weighted and L2-normalized, then linearly projected to a small dense
vector. Projection columns are materialized lazily from a counter-based
RNG keyed by (seed, column), so an untrained model needs no storage and
training only ever touches the columns its data activates. Base columns
are drawn N(0, 1/dim_out), which makes untrained dot-product relevance
approximate the lexical cosine similarity of the hashed features.

Two models share this encoder core: the retriever (query vs. disease
document, softmax contrastive loss with in-batch negatives) and the
priority ranker (dialogue history vs. candidate disease, linear scoring
head over concatenated and crossed features).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kb import DiseaseDoc, KnowledgeBase
from .textproc import normalize, word_tokens

DEFAULT_DIM_IN = 2**18
DEFAULT_DIM_OUT = 64
CHAR_NGRAM_RANGE = (3, 5)
FORMAT_VERSION = 1

_BLOCK_SEP = "\x1f"


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or a violated batch contract)."""


def stable_hash64(text: str) -> int:
    """Process-independent 64-bit hash (builtin str hash is randomized)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def text_features(text: str, dim_in: int, block: str = "") -> dict[int, float]:
    """Hashed TF features of a text: word unigrams + char 3..5-grams,
    L2-normalized. Empty text maps to the empty feature dict."""
    normalized = normalize(text)
    counts: dict[int, float] = {}

    def bump(key: str) -> None:
        idx = stable_hash64(f"{block}{_BLOCK_SEP}{key}") % dim_in
        counts[idx] = counts.get(idx, 0.0) + 1.0

    for token in word_tokens(normalized):
        bump(f"w:{token}")
    lo, hi = CHAR_NGRAM_RANGE
    for n in range(lo, hi + 1):
        for i in range(len(normalized) - n + 1):
            bump(f"c{n}:{normalized[i : i + n]}")
    return _l2_normalized(counts)


def cross_features(
    left_tokens: Sequence[str], right_tokens: Sequence[str], dim_in: int, block: str = "x"
) -> dict[int, float]:
    """Hashed token-pair co-occurrence features, L2-normalized."""
    counts: dict[int, float] = {}
    for lt in left_tokens:
        for rt in right_tokens:
            idx = stable_hash64(f"{block}{_BLOCK_SEP}{lt}|{rt}") % dim_in
            counts[idx] = counts.get(idx, 0.0) + 1.0
    return _l2_normalized(counts)


def _l2_normalized(counts: dict[int, float]) -> dict[int, float]:
    norm = math.sqrt(sum(v * v for v in counts.values()))
    if norm == 0.0:
        return {}
    return {j: v / norm for j, v in counts.items()}


def merge_features(*blocks: dict[int, float]) -> dict[int, float]:
    merged: dict[int, float] = {}
    for blk in blocks:
        for j, v in blk.items():
            merged[j] = merged.get(j, 0.0) + v
    return merged


class EncoderModel:
    """Linear projection over the hashed feature space.

    ``embed`` is deterministic given (model, text); columns never touched
    by training come from the seed-keyed RNG, touched ones are stored.
    """

    def __init__(self, dim_in: int = DEFAULT_DIM_IN, dim_out: int = DEFAULT_DIM_OUT, seed: int = 0):
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self.seed = int(seed)
        self._learned: dict[int, np.ndarray] = {}
        self._base_cache: dict[int, np.ndarray] = {}

    def _base_column(self, j: int) -> np.ndarray:
        cached = self._base_cache.get(j)
        if cached is None:
            key = (self.seed & 0xFFFFFFFFFFFFFFFF) << 64 | (j & 0xFFFFFFFFFFFFFFFF)
            rng = np.random.Generator(np.random.Philox(key=key))
            cached = rng.standard_normal(self.dim_out) / math.sqrt(self.dim_out)
            self._base_cache[j] = cached
        return cached

    def column(self, j: int) -> np.ndarray:
        learned = self._learned.get(j)
        return (learned if learned is not None else self._base_column(j)).copy()

    def set_column(self, j: int, values: np.ndarray) -> None:
        self._learned[j] = np.asarray(values, dtype=np.float64).copy()

    def add_to_column(self, j: int, delta: np.ndarray) -> None:
        current = self._learned.get(j)
        if current is None:
            current = self._base_column(j).copy()
        current = current + delta
        self._learned[j] = current

    def embed_features(self, feats: dict[int, float]) -> np.ndarray:
        if not feats:
            return np.zeros(self.dim_out)
        cols = np.empty((len(feats), self.dim_out))
        weights = np.empty(len(feats))
        for i, (j, weight) in enumerate(feats.items()):
            learned = self._learned.get(j)
            cols[i] = learned if learned is not None else self._base_column(j)
            weights[i] = weight
        return weights @ cols

    def embed(self, text: str) -> np.ndarray:
        return self.embed_features(text_features(text, self.dim_in))

    def weights_digest(self) -> str:
        """Hash of all learned columns; bit-equal models share digests."""
        h = hashlib.sha256()
        h.update(f"{self.dim_in},{self.dim_out},{self.seed}".encode())
        for j in sorted(self._learned):
            h.update(j.to_bytes(8, "little"))
            h.update(self._learned[j].tobytes())
        return h.hexdigest()

    def _state_arrays(self) -> dict[str, np.ndarray]:
        indices = np.array(sorted(self._learned), dtype=np.int64)
        data = (
            np.stack([self._learned[j] for j in indices])
            if len(indices)
            else np.zeros((0, self.dim_out))
        )
        return {
            "format_version": np.array(FORMAT_VERSION, dtype=np.int64),
            "dim_in": np.array(self.dim_in, dtype=np.int64),
            "dim_out": np.array(self.dim_out, dtype=np.int64),
            "seed": np.array(self.seed, dtype=np.int64),
            "col_index": indices,
            "col_data": data,
        }

    def save(self, path: str | Path) -> None:
        np.savez(path, **self._state_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        with np.load(path) as data:
            model = cls._from_arrays(data)
        return model

    @classmethod
    def _from_arrays(cls, data) -> "EncoderModel":
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        model = cls(int(data["dim_in"]), int(data["dim_out"]), int(data["seed"]))
        for j, col in zip(data["col_index"], data["col_data"]):
            model._learned[int(j)] = np.array(col, dtype=np.float64)
        return model


def relevance(model: EncoderModel, query: str, doc: DiseaseDoc) -> float:
    """Dot-product relevance between the query and the document text."""
    return float(np.dot(model.embed(query), model.embed(doc.full_text())))


def contrastive_loss(pos_score: float, neg_scores: Iterable[float]) -> float:
    """Softmax cross-entropy of the positive score against the negatives.

    Computed in delta form, log-sum-exp stabilized: exactly zero when there
    are no negatives, strictly positive otherwise (down to exp underflow at
    deficits beyond ~745)."""
    deltas = [float(n) - float(pos_score) for n in neg_scores]
    if not deltas:
        return 0.0
    m = max(deltas)
    if m <= 0.0:
        return math.log1p(sum(math.exp(d) for d in deltas))
    return m + math.log(math.exp(-m) + sum(math.exp(d - m) for d in deltas))


@dataclass(frozen=True)
class ContrastiveBatch:
    """One training example: an anchor text with positive and (explicit)
    negative disease ids. In-batch negatives are added by the trainer."""

    anchor: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.positives:
            raise ValueError("contrastive batch requires at least one positive")
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"positives and negatives overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class RankTurn:
    """One ranker training turn: positives are the post-hoc annotated
    diseases, negatives the remainder of the refined + pre-annotated pool."""

    history: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.positives:
            raise ValueError("rank turn requires at least one positive")
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"positives and negatives overlap: {sorted(overlap)}")


def build_rank_turn(
    history: str,
    e_post: Sequence[str],
    e_pri: Sequence[str],
    refined: Sequence[str],
) -> RankTurn:
    """Assemble a training turn using the ranker's negative-selection rule:
    negatives are the union of the refined list and the pre-annotated list,
    minus the positives (the post-annotated diseases)."""
    positives = tuple(dict.fromkeys(e_post))
    pool = list(dict.fromkeys([*refined, *e_pri]))
    negatives = tuple(d for d in pool if d not in positives)
    return RankTurn(history=history, positives=positives, negatives=negatives)


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    skipped_turns: int = 0


class _FeatureCache:
    def __init__(self, dim_in: int):
        self.dim_in = dim_in
        self._by_text: dict[str, dict[int, float]] = {}

    def get(self, text: str) -> dict[int, float]:
        feats = self._by_text.get(text)
        if feats is None:
            feats = text_features(text, self.dim_in)
            self._by_text[text] = feats
        return feats


def with_in_batch_negatives(chunk: Sequence[ContrastiveBatch]) -> list[ContrastiveBatch]:
    """Within a chunk, every other example's positives become additional
    negatives (minus any overlap with the example's own positives)."""
    out = []
    for i, example in enumerate(chunk):
        extra: list[str] = []
        seen = set(example.negatives) | set(example.positives)
        for k, other in enumerate(chunk):
            if k == i:
                continue
            for pos in other.positives:
                if pos not in seen:
                    extra.append(pos)
                    seen.add(pos)
        out.append(
            ContrastiveBatch(example.anchor, example.positives, example.negatives + tuple(extra))
        )
    return out


def _doc_text(kb: KnowledgeBase, doc_id: str) -> str:
    return kb.require(doc_id).full_text()


def retriever_chunk_loss_and_grads(
    model: EncoderModel, chunk: Sequence[ContrastiveBatch], kb: KnowledgeBase, cache=None
) -> tuple[float, dict[int, np.ndarray]]:
    """Mean contrastive loss over a chunk of examples and its gradient with
    respect to the touched projection columns."""
    cache = cache or _FeatureCache(model.dim_in)
    feats: dict[str, dict[int, float]] = {}
    embeds: dict[str, np.ndarray] = {}
    vec_grads: dict[str, np.ndarray] = {}

    def prepare(key: str, text: str) -> None:
        if key not in feats:
            feats[key] = cache.get(text)
            embeds[key] = model.embed_features(feats[key])
            vec_grads[key] = np.zeros(model.dim_out)

    for i, example in enumerate(chunk):
        prepare(f"a{i}", example.anchor)
        for doc_id in (*example.positives, *example.negatives):
            prepare(f"d:{doc_id}", _doc_text(kb, doc_id))

    total = 0.0
    n_terms = 0
    for i, example in enumerate(chunk):
        a_key = f"a{i}"
        h_a = embeds[a_key]
        neg_keys = [f"d:{n}" for n in example.negatives]
        neg_scores = [float(np.dot(h_a, embeds[k])) for k in neg_keys]
        for pos in example.positives:
            n_terms += 1
            p_key = f"d:{pos}"
            pos_score = float(np.dot(h_a, embeds[p_key]))
            total += contrastive_loss(pos_score, neg_scores)
            probs = _softmax([pos_score, *neg_scores])
            vec_grads[a_key] += (probs[0] - 1.0) * embeds[p_key]
            vec_grads[p_key] += (probs[0] - 1.0) * h_a
            for k, sigma in zip(neg_keys, probs[1:]):
                vec_grads[a_key] += sigma * embeds[k]
                vec_grads[k] += sigma * h_a

    scale = 1.0 / max(n_terms, 1)
    col_grads: dict[int, np.ndarray] = {}
    for key, grad in vec_grads.items():
        for j, weight in feats[key].items():
            acc = col_grads.get(j)
            if acc is None:
                acc = np.zeros(model.dim_out)
                col_grads[j] = acc
            acc += (scale * weight) * grad
    return total * scale, col_grads


def _softmax(scores: Sequence[float]) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    arr = arr - arr.max()
    exp = np.exp(arr)
    return exp / exp.sum()


def train_retriever(
    model: EncoderModel,
    batches: Iterable[ContrastiveBatch],
    config: TrainConfig,
    kb: KnowledgeBase,
) -> TrainResult:
    """SGD over the contrastive objective with in-batch negative sampling.

    Updates the model in place; deterministic under a fixed config seed.
    A non-finite loss aborts with the offending epoch/batch named.
    """
    examples = list(batches)
    result = TrainResult()
    if not examples:
        return result
    rng = np.random.default_rng(config.seed)
    cache = _FeatureCache(model.dim_in)
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for b, start in enumerate(range(0, len(examples), config.batch_size)):
            chunk = [examples[i] for i in order[start : start + config.batch_size]]
            chunk = with_in_batch_negatives(chunk)
            loss, col_grads = retriever_chunk_loss_and_grads(model, chunk, kb, cache)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for j, grad in col_grads.items():
                model.add_to_column(j, -config.lr * grad)
            losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
    return result


class RankerModel:
    """Scores how likely a disease is to be discussed next, given the
    dialogue history: a linear head over the encoded concatenation of
    history features, disease features, and their token cross-features."""

    _FEATURE_CACHE_CAP = 4096

    def __init__(self, dim_in: int = DEFAULT_DIM_IN, dim_out: int = DEFAULT_DIM_OUT, seed: int = 0):
        self.encoder = EncoderModel(dim_in, dim_out, seed)
        # distinct key stream from the encoder's column RNG
        head_key = ((seed ^ 0x48454144) & 0xFFFFFFFFFFFFFFFF) << 64 | 0xFFFFFFFFFFFFFFFF
        head_rng = np.random.Generator(np.random.Philox(key=head_key))
        self.head_w = head_rng.standard_normal(dim_out) / math.sqrt(dim_out)
        self.head_b = 0.0
        # feature blocks are pure functions of the text, safe to cache
        self._block_cache: dict[tuple[str, str], dict[int, float]] = {}
        self._token_cache: dict[str, list[str]] = {}

    def _cached_block(self, kind: str, text: str) -> dict[int, float]:
        key = (kind, text)
        feats = self._block_cache.get(key)
        if feats is None:
            if len(self._block_cache) >= self._FEATURE_CACHE_CAP:
                self._block_cache.clear()
            feats = text_features(text, self.encoder.dim_in, block=kind)
            self._block_cache[key] = feats
        return feats

    def _cached_tokens(self, text: str) -> list[str]:
        tokens = self._token_cache.get(text)
        if tokens is None:
            if len(self._token_cache) >= self._FEATURE_CACHE_CAP:
                self._token_cache.clear()
            tokens = word_tokens(text)
            self._token_cache[text] = tokens
        return tokens

    def history_features(self, history: str) -> dict[int, float]:
        return self._cached_block("h", history)

    def pair_features(self, history: str, disease_text: str) -> dict[int, float]:
        """Disease block plus history-disease cross features (cached); the
        full input is this merged with ``history_features``."""
        key = ("hx", history + _BLOCK_SEP + disease_text)
        feats = self._block_cache.get(key)
        if feats is None:
            if len(self._block_cache) >= self._FEATURE_CACHE_CAP:
                self._block_cache.clear()
            feats = merge_features(
                self._cached_block("d", disease_text),
                cross_features(
                    self._cached_tokens(history),
                    self._cached_tokens(disease_text),
                    self.encoder.dim_in,
                ),
            )
            self._block_cache[key] = feats
        return feats

    def features(self, history: str, disease_text: str) -> dict[int, float]:
        return merge_features(
            self.history_features(history), self.pair_features(history, disease_text)
        )

    def score_features(self, feats: dict[int, float]) -> float:
        h = self.encoder.embed_features(feats)
        return float(np.dot(self.head_w, h) + self.head_b)

    def score(self, history: str, disease_text: str) -> float:
        return self.score_features(self.features(history, disease_text))

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.encoder.weights_digest().encode())
        h.update(self.head_w.tobytes())
        h.update(np.float64(self.head_b).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        arrays = self.encoder._state_arrays()
        arrays["head_w"] = self.head_w
        arrays["head_b"] = np.array(self.head_b, dtype=np.float64)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "RankerModel":
        with np.load(path) as data:
            encoder = EncoderModel._from_arrays(data)
            model = cls(encoder.dim_in, encoder.dim_out, encoder.seed)
            model.encoder = encoder
            model.head_w = np.array(data["head_w"], dtype=np.float64)
            model.head_b = float(data["head_b"])
        return model


def _scatter_grad(col_grads: dict[int, np.ndarray], feats: dict[int, float], vec: np.ndarray) -> None:
    for j, weight in feats.items():
        acc = col_grads.get(j)
        if acc is None:
            acc = np.zeros(len(vec))
            col_grads[j] = acc
        acc += weight * vec


def ranker_turn_loss_and_grads(
    model: RankerModel, turn: RankTurn, kb: KnowledgeBase
) -> tuple[float, dict[int, np.ndarray], np.ndarray, float]:
    """Loss for one turn plus gradients for (columns, head_w, head_b).

    The history feature block is shared by every candidate of the turn, so
    it is embedded once and its gradient scattered once with the summed
    coefficient (exact, by linearity of the encoder)."""
    ids = [*turn.positives, *turn.negatives]
    h_feats = model.history_features(turn.history)
    h_vec = model.encoder.embed_features(h_feats)
    pair_feats = {doc_id: model.pair_features(turn.history, _doc_text(kb, doc_id)) for doc_id in ids}
    embeds = {doc_id: h_vec + model.encoder.embed_features(pair_feats[doc_id]) for doc_id in ids}
    scores = {doc_id: float(np.dot(model.head_w, embeds[doc_id]) + model.head_b) for doc_id in ids}

    score_grads = {doc_id: 0.0 for doc_id in ids}
    neg_scores = [scores[n] for n in turn.negatives]
    total = 0.0
    for pos in turn.positives:
        total += contrastive_loss(scores[pos], neg_scores)
        probs = _softmax([scores[pos], *neg_scores])
        score_grads[pos] += probs[0] - 1.0
        for neg, sigma in zip(turn.negatives, probs[1:]):
            score_grads[neg] += float(sigma)
    scale = 1.0 / len(turn.positives)

    grad_w = np.zeros(model.encoder.dim_out)
    grad_b = 0.0
    col_grads: dict[int, np.ndarray] = {}
    g_total = 0.0
    for doc_id in ids:
        g = scale * score_grads[doc_id]
        if g == 0.0:
            continue
        g_total += g
        grad_w += g * embeds[doc_id]
        grad_b += g
        _scatter_grad(col_grads, pair_feats[doc_id], g * model.head_w)
    if g_total != 0.0:
        _scatter_grad(col_grads, h_feats, g_total * model.head_w)
    return total * scale, col_grads, grad_w, grad_b


def train_ranker(
    model: RankerModel,
    turns: Iterable[RankTurn],
    config: TrainConfig,
    kb: KnowledgeBase,
) -> TrainResult:
    """SGD over per-turn contrastive losses. Turns with an empty negative
    pool are skipped and counted in the result."""
    all_turns = list(turns)
    result = TrainResult()
    usable = [t for t in all_turns if t.negatives]
    result.skipped_turns = len(all_turns) - len(usable)
    if not usable:
        return result
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for b, i in enumerate(order):
            turn = usable[i]
            loss, col_grads, grad_w, grad_b = ranker_turn_loss_and_grads(model, turn, kb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, turn {b}")
            for j, grad in col_grads.items():
                model.encoder.add_to_column(j, -config.lr * grad)
            model.head_w = model.head_w - config.lr * grad_w
            model.head_b = model.head_b - config.lr * grad_b
            losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
    return result
