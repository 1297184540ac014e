import pytest

from diagchat.abductive import ParseError
from diagchat.alignment import ThoughtProcess
from diagchat.annotation import (
    CorpusStats,
    annotate_dialogue,
    annotate_post,
    annotate_pri,
    extract_thought,
    link,
    merge_disease_lists,
    parse_mentions,
    stats,
)
from diagchat.dialogue import Dialogue, DialogueHistory, DialogueTurn
from diagchat.encoder import EncoderModel, relevance
from diagchat.llm import BackendError, MockBackend, TemplateCatalog
from diagchat.retrieval import Retriever

from helpers import ScriptedClinicBackend, make_synth_kb

CATALOG = TemplateCatalog.load_default()
EXEMPLARS = ["exemplar a", "exemplar b", "exemplar c"]


def history_1():
    history = DialogueHistory()
    history.add_patient("I keep getting heartburn after dinner.")
    return history


# -- mention parsing -----------------------------------------------------------

def test_parse_mentions_ordered():
    mentions = parse_mentions("1. allergic pharyngitis | reason: itchy throat\n2. GERD")
    assert [m.text for m in mentions] == ["allergic pharyngitis", "GERD"]
    assert [m.rank for m in mentions] == [1, 2]
    assert mentions[0].rationale == "itchy throat"
    assert mentions[1].rationale == ""


def test_parse_mentions_empty_errors():
    with pytest.raises(ParseError):
        parse_mentions("")


def test_parse_mentions_bad_line_errors():
    with pytest.raises(ParseError, match="grammar"):
        parse_mentions("the patient likely has reflux")


def test_parse_mentions_dedupes_keeping_first_rank():
    mentions = parse_mentions("1. reflux\n2. Reflux\n3. gastritis")
    assert [m.text for m in mentions] == ["reflux", "gastritis"]
    assert [m.rank for m in mentions] == [1, 2]


def test_annotate_pri_and_post_prompts(fixture_kb):
    prompts = []

    class Capture:
        def complete(self, prompt, params=None):
            prompts.append(prompt)
            return "1. gastritis | reason: burning pain"

    annotate_pri(Capture(), history_1(), CATALOG)
    annotate_post(Capture(), history_1(), "Any nausea with it?", CATALOG)
    assert "heartburn after dinner" in prompts[0]
    assert "Doctor's response" not in prompts[0]
    assert "Any nausea with it?" in prompts[1]  # the post prompt sees the response


def test_annotate_requires_history(fixture_kb):
    with pytest.raises(ValueError):
        annotate_pri(MockBackend(default="1. x"), DialogueHistory(), CATALOG)


# -- linking ---------------------------------------------------------------------

def test_link_exact_name(fixture_kb):
    model = EncoderModel(dim_in=512, dim_out=16, seed=1)
    backend = MockBackend(default=lambda p: "d1" if "gastritis" in p else "none")
    result = link("gastritis", model, fixture_kb, backend, CATALOG)
    assert result.disease_id == "d1"
    assert result.reason == "matched"


def test_link_no_match_is_unlinked(fixture_kb):
    model = EncoderModel(dim_in=512, dim_out=16, seed=1)
    result = link("quantum flu", model, fixture_kb, MockBackend(default="none"), CATALOG)
    assert result.disease_id is None
    assert result.reason == "no match confirmed"


def test_link_alias_found_within_coarse_top10():
    kb = make_synth_kb(30, seed=4)
    target = kb.get("s007")
    alias = target.aliases[0]
    model = EncoderModel(dim_in=2**14, dim_out=32, seed=2)
    # brute-force oracle: the alias must rank the target within the top 10
    scored = sorted(
        ((relevance(model, alias, doc), doc.id) for doc in kb), key=lambda x: (-x[0], x[1])
    )
    oracle_rank = [doc_id for _, doc_id in scored].index("s007") + 1
    assert oracle_rank <= 10
    backend = MockBackend(default=lambda p: "s007" if alias in p else "none")
    result = link(alias, model, kb, backend, CATALOG)
    assert result.disease_id == "s007"
    assert "s007" in result.candidates


def test_link_never_returns_id_outside_coarse_list():
    kb = make_synth_kb(30, seed=4)
    model = EncoderModel(dim_in=2**14, dim_out=32, seed=2)
    retriever = Retriever(model, kb)
    coarse = set(retriever.top_k("skin rash disorder", 10).ids())
    outside = next(doc_id for doc_id in kb.ids() if doc_id not in coarse)
    backend = MockBackend(default=outside)  # rogue pick
    result = link("skin rash disorder", model, kb, backend, CATALOG, retriever=retriever)
    assert result.disease_id is None
    assert result.reason == "selection outside candidate list"


def test_link_multiple_answers_takes_first_logs_extras(fixture_kb):
    model = EncoderModel(dim_in=512, dim_out=16, seed=1)
    backend = MockBackend(default="d1\nd2")
    result = link("gastritis", model, fixture_kb, backend, CATALOG)
    assert result.disease_id == "d1"
    assert result.extras == ["d2"]


def test_link_backend_failure_degrades_to_unlinked(fixture_kb):
    class Failing:
        def complete(self, prompt, params=None):
            raise BackendError("socket torn")

    model = EncoderModel(dim_in=512, dim_out=16, seed=1)
    result = link("gastritis", model, fixture_kb, Failing(), CATALOG)
    assert result.disease_id is None
    assert "socket torn" in result.reason


def test_link_rejects_empty_mention(fixture_kb):
    model = EncoderModel(dim_in=512, dim_out=16, seed=1)
    with pytest.raises(ValueError):
        link("  ", model, fixture_kb, MockBackend(default="none"), CATALOG)


# -- merging ----------------------------------------------------------------------

def test_merge_provenance_partition():
    merged = merge_disease_lists(e_pri=["a", "b", "c"], e_post=["b", "d"])
    assert merged == [
        {"id": "b", "provenance": "both"},
        {"id": "d", "provenance": "post"},
        {"id": "a", "provenance": "pri"},
        {"id": "c", "provenance": "pri"},
    ]
    ids = [m["id"] for m in merged]
    assert set(ids) == {"a", "b", "c", "d"}  # union, no duplicates
    assert len(ids) == len(set(ids))


def test_merge_empty_sides():
    assert merge_disease_lists([], []) == []
    assert merge_disease_lists(["a"], []) == [{"id": "a", "provenance": "pri"}]
    assert merge_disease_lists([], ["a"]) == [{"id": "a", "provenance": "post"}]


# -- thought extraction -------------------------------------------------------------

def test_extract_thought_four_steps(fixture_kb):
    gold = "Have you done any cleaning today?"
    raw = (
        "1. respiratory issue suspected\n2. allergy likely\n"
        "3. infrequent symptoms fit triggers\n4. confirming allergy is the priority\n"
        f'Therefore, the doctor responds, "{gold}"'
    )
    thought = extract_thought(MockBackend(default=raw), history_1(), gold, EXEMPLARS, CATALOG)
    assert len(thought.steps) == 4
    assert thought.response == gold


def test_extract_thought_single_step(fixture_kb):
    raw = '1. only one consideration\nTherefore, the doctor responds, "rest up"'
    thought = extract_thought(MockBackend(default=raw), history_1(), "rest up", EXEMPLARS, CATALOG)
    assert len(thought.steps) == 1


def test_extract_thought_marker_absent_errors(fixture_kb):
    with pytest.raises(ParseError, match="marker"):
        extract_thought(
            MockBackend(default="1. thinking without conclusion"),
            history_1(),
            "gold",
            EXEMPLARS,
            CATALOG,
        )


def test_extract_thought_requires_gold(fixture_kb):
    with pytest.raises(ValueError):
        extract_thought(MockBackend(default="x"), history_1(), "", EXEMPLARS, CATALOG)


# -- stats ---------------------------------------------------------------------------

def make_thought(n_steps, tokens_per_step=5):
    words = " ".join(f"w{i}" for i in range(tokens_per_step))
    return ThoughtProcess(steps=[words] * n_steps, response="ok", raw="")


def test_stats_avg_steps():
    result = stats([make_thought(4), make_thought(5)])
    assert result.n_thoughts == 2
    assert result.avg_steps == pytest.approx(4.5)


def test_stats_empty_corpus():
    assert stats([]) == CorpusStats(0, 0.0, 0.0, 0.0)


def test_stats_token_totals():
    result = stats([make_thought(3, tokens_per_step=10)])
    assert result.avg_total_tokens == pytest.approx(30.0)
    assert result.avg_tokens_per_step == pytest.approx(10.0)


def test_stats_invariant_under_duplication():
    corpus = [make_thought(3, 7), make_thought(5, 2), make_thought(1, 9)]
    once = stats(corpus)
    twice = stats(corpus + corpus)
    assert twice.avg_steps == pytest.approx(once.avg_steps)
    assert twice.avg_tokens_per_step == pytest.approx(once.avg_tokens_per_step)
    assert twice.avg_total_tokens == pytest.approx(once.avg_total_tokens)
    assert twice.n_thoughts == 2 * once.n_thoughts


# -- pipeline smoke --------------------------------------------------------------------

def test_annotate_dialogue_record_shape(fixture_kb):
    backend = MockBackend(default=ScriptedClinicBackend(fixture_kb))
    model = EncoderModel(dim_in=2**14, dim_out=32, seed=3)
    dialogue = Dialogue(
        id="dlg1",
        turns=[
            DialogueTurn(
                patient="My throat is itchy and I keep gagging.",
                doctor="Have you had pharyngitis before?",
            )
        ],
    )
    records = annotate_dialogue(dialogue, model, fixture_kb, backend, CATALOG, EXEMPLARS)
    assert len(records) == 1
    record = records[0]
    assert record["dialogue_id"] == "dlg1"
    assert record["turn"] == 1
    merged_ids = [m["id"] for m in record["e_merged"]]
    assert set(merged_ids) == set(record["e_pri"]) | set(record["e_post"])
    assert record["thought"]["response"] == "Have you had pharyngitis before?"
