import math
import random

import pytest

from diagchat.metrics import EntityLexicon, bleu, entity_f1, evaluate_run, rouge_n


# -- independent oracle ---------------------------------------------------------
# Deliberately written with a different mechanism than the engine: manual
# character scanning for tokens, list-based n-grams, product-form geometric
# mean. Values from this oracle are the reference for parity checks.

def oracle_tokens(text):
    tokens, current = [], []
    for ch in text.lower():
        if ch.isalnum() or ch == "_":
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def oracle_ngrams(tokens, n):
    grams = []
    for i in range(len(tokens)):
        if i + n <= len(tokens):
            grams.append(tuple(tokens[i : i + n]))
    return grams


def oracle_bleu(hyp, ref, max_n):
    hyp_t, ref_t = oracle_tokens(hyp), oracle_tokens(ref)
    if not hyp_t:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        hyp_grams = oracle_ngrams(hyp_t, n)
        if not hyp_grams:
            return 0.0
        ref_grams = oracle_ngrams(ref_t, n)
        matched = 0
        remaining = list(ref_grams)
        for gram in hyp_grams:
            if gram in remaining:
                remaining.remove(gram)  # clipping by consuming references
                matched += 1
        if matched == 0:
            return 0.0
        precisions.append(matched / len(hyp_grams))
    geo = 1.0
    for p in precisions:
        geo *= p
    geo = geo ** (1.0 / max_n)
    c, r = len(hyp_t), len(ref_t)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * geo


def oracle_rouge(hyp, ref, n):
    ref_grams = oracle_ngrams(oracle_tokens(ref), n)
    hyp_grams = oracle_ngrams(oracle_tokens(hyp), n)
    matched = 0
    remaining = list(hyp_grams)
    for gram in ref_grams:
        if gram in remaining:
            remaining.remove(gram)
            matched += 1
    return matched / len(ref_grams)


def oracle_f1(pred, gold):
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    tp = len(pred & gold)
    if tp == 0:
        return 0.0
    p, r = tp / len(pred), tp / len(gold)
    return 2 * p * r / (p + r)


# Frozen fixture pairs exercising identity, clipping, brevity, and misses.
FIXTURE_PAIRS = [
    ("the patient reports sharp pain", "the patient reports sharp pain"),
    ("a b c d", "a b x y"),
    ("a", "a b c"),
    ("the the the the", "the cat sat here"),
    ("rest and drink fluids", "please rest and drink warm fluids"),
    ("take the medication twice daily", "take medication twice a day"),
    ("completely unrelated words here", "nothing matches this reference"),
    ("fever cough fatigue", "fatigue cough fever"),
    ("did the pain start after eating fried food", "did the pain start after eating"),
    ("how long has this been going on", "how long has it been going on for"),
]


def test_metric_parity_with_oracle_on_frozen_pairs():
    for hyp, ref in FIXTURE_PAIRS:
        for max_n in (1, 2, 4):
            assert bleu(hyp, ref, max_n) == pytest.approx(
                oracle_bleu(hyp, ref, max_n), abs=1e-9
            ), (hyp, ref, max_n)
        for n in (1, 2):
            assert rouge_n(hyp, ref, n) == pytest.approx(oracle_rouge(hyp, ref, n), abs=1e-9)


def test_bleu_identity_is_one():
    for text in ("a b c d", "the quick brown fox jumps"):
        for max_n in (1, 2, 4):
            assert bleu(text, text, max_n) == pytest.approx(1.0, abs=1e-12)


def test_bleu_derived_half_precision():
    # clipped unigram precision 2/4, equal lengths so BP = 1
    assert bleu("a b c d", "a b x y", max_n=1) == pytest.approx(0.5, abs=1e-12)


def test_bleu_derived_brevity_penalty():
    # hyp len 1, ref len 3: BP = e^(1 - 3) and unigram precision 1
    assert bleu("a", "a b c", max_n=1) == pytest.approx(math.exp(-2.0), abs=1e-12)


def test_bleu_empty_hypothesis_zero():
    assert bleu("", "a b", max_n=1) == 0.0


def test_bleu_empty_reference_rejected():
    with pytest.raises(ValueError):
        bleu("a", "", max_n=1)


def test_bleu_zero_precision_without_smoothing():
    assert bleu("x y z", "a b c", max_n=1) == 0.0
    # bigram overlap absent: BLEU-2 collapses to 0 despite unigram hits
    assert bleu("a c", "a b c", max_n=2) == 0.0


def test_bleu_smoothing_flag_keeps_score_positive():
    assert bleu("a c", "a b c", max_n=2, smooth=True) > 0.0


def test_bleu_clipping_counts_repeats_once_each():
    # "the" appears once in the reference: clipped matches = 1 of 4
    assert bleu("the the the the", "the cat sat here", max_n=1) == pytest.approx(0.25, abs=1e-12)


def test_bleu_unigram_component_invariant_to_reference_order():
    rng = random.Random(9)
    hyp = "fever cough and mild fatigue today"
    ref_tokens = ["fatigue", "fever", "cough", "without", "chills", "today"]
    base = bleu(hyp, " ".join(ref_tokens), max_n=1)
    for _ in range(10):
        rng.shuffle(ref_tokens)
        assert bleu(hyp, " ".join(ref_tokens), max_n=1) == pytest.approx(base, abs=1e-12)


def test_rouge_recall_examples():
    assert rouge_n("a b", "a b c", 1) == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_n("x y", "a b c", 1) == 0.0
    assert rouge_n("a b c", "a b c", 2) == 1.0


def test_rouge_superset_hypothesis_full_recall():
    assert rouge_n("z a b c q", "a b c", 1) == 1.0


def test_rouge_reference_too_short_errors():
    with pytest.raises(ValueError, match="fewer"):
        rouge_n("a b", "a", 2)


def test_metrics_bounded():
    for hyp, ref in FIXTURE_PAIRS:
        for max_n in (1, 2, 4):
            assert 0.0 <= bleu(hyp, ref, max_n) <= 1.0
        assert 0.0 <= rouge_n(hyp, ref, 1) <= 1.0


# -- entity F1 -----------------------------------------------------------------

def test_entity_f1_examples():
    assert entity_f1({"gastritis"}, {"gastritis", "colitis"}) == pytest.approx(2 / 3)
    assert entity_f1({"a", "b"}, {"a", "b"}) == 1.0
    assert entity_f1(set(), {"a"}) == 0.0
    assert entity_f1({"a"}, set()) == 0.0
    assert entity_f1(set(), set()) == 1.0
    assert entity_f1({"a"}, {"b"}) == 0.0


def test_entity_f1_matches_oracle():
    cases = [({"a"}, {"a", "b"}), ({"a", "b", "c"}, {"b"}), ({"x"}, {"y"}), (set(), set())]
    for pred, gold in cases:
        assert entity_f1(pred, gold) == pytest.approx(oracle_f1(pred, gold), abs=1e-12)


def test_lexicon_longest_match(fixture_kb):
    lexicon = EntityLexicon.from_kb(fixture_kb)
    assert lexicon.extract("signs of stomach inflammation today") == {"d1"}
    assert lexicon.extract("maybe acid reflux or gastritis") == {"d4", "d1"}
    assert lexicon.extract("no entities here") == set()
    # longest match wins: "allergic pharyngitis" should not also fire on a
    # hypothetical shorter phrase inside it
    assert lexicon.extract("classic allergic pharyngitis episode") == {"d2"}


def test_lexicon_digest_stable(fixture_kb):
    assert EntityLexicon.from_kb(fixture_kb).digest() == EntityLexicon.from_kb(fixture_kb).digest()


# -- evaluate_run ------------------------------------------------------------------

def test_evaluate_run_identity_scores_one(fixture_kb):
    lexicon = EntityLexicon.from_kb(fixture_kb)
    gold = ["the gastritis is flaring again", "this looks like acid reflux to me"]
    report = evaluate_run(gold, gold, lexicon)
    for key, value in report.scores.items():
        assert value == pytest.approx(1.0), key
    assert report.n_turns == 2
    assert report.tokenizer_id
    assert report.lexicon_digest


def test_evaluate_run_per_turn_average(fixture_kb):
    lexicon = EntityLexicon.from_kb(fixture_kb)
    outputs = ["a b c", "x y z"]
    gold = ["a b c", "p q r"]
    report = evaluate_run(outputs, gold, lexicon)
    assert report.scores["B-1"] == pytest.approx(0.5)


def test_evaluate_run_misaligned_counts(fixture_kb):
    lexicon = EntityLexicon.from_kb(fixture_kb)
    with pytest.raises(ValueError, match="misaligned"):
        evaluate_run(["a"], ["a", "b"], lexicon)
