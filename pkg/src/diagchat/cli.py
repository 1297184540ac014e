"""Umbrella command line: KB ingestion, training, annotation, evaluation,
an interactive consultation REPL, and the HTTP service.

Evaluation commands print a delimited table and, given --out-dir, write the
table as TSV plus a rendered figure next to it.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import reporting
from .annotation import annotate_dialogue, write_corpus_jsonl
from .dialogue import dialogue_from_record
from .encoder import (
    ContrastiveBatch,
    EncoderModel,
    RankerModel,
    RankTurn,
    TrainConfig,
    train_ranker,
    train_retriever,
)
from .kb import KnowledgeBase, ingest_file
from .llm import TemplateCatalog, load_backend_file
from .metrics import EntityLexicon, evaluate_run
from .retrieval import recall_at_k
from .service import Engine, EngineConfig, create_app, engine_from_paths, load_exemplars


@click.group()
def main() -> None:
    """Diagnostic-reasoning dialogue engine."""


@main.group()
def kb() -> None:
    """Knowledge-base commands."""


@kb.command("ingest")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output KB file.")
def kb_ingest(source: str, out: str) -> None:
    """Ingest a JSONL disease-document stream into an embedded KB file."""
    result = ingest_file(source)
    result.kb.save(out)
    click.echo(f"ingested {result.count} docs into {out}")
    for rejection in result.rejections:
        click.echo(f"rejected line {rejection.line_no}: duplicate id {rejection.doc_id}", err=True)


def _read_jsonl(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


@main.group()
def train() -> None:
    """Train the retriever or the priority ranker."""


def _train_options(fn):
    fn = click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))(fn)
    fn = click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--out", required=True, type=click.Path(dir_okay=False))(fn)
    fn = click.option("--epochs", default=5, show_default=True)(fn)
    fn = click.option("--seed", default=0, show_default=True)(fn)
    fn = click.option("--lr", default=0.1, show_default=True)(fn)
    fn = click.option("--batch-size", default=8, show_default=True)(fn)
    fn = click.option("--dim-in", default=2**18, show_default=True)(fn)
    fn = click.option("--dim-out", default=64, show_default=True)(fn)
    return fn


def _write_loss_reports(losses: list[float], out: str) -> None:
    stem = Path(out).with_suffix("")
    reporting.loss_table_tsv(losses, f"{stem}.losses.tsv")
    reporting.loss_figure(losses, f"{stem}.losses.png")


@train.command("retriever")
@_train_options
def train_retriever_cmd(data, kb_path, out, epochs, seed, lr, batch_size, dim_in, dim_out) -> None:
    """Contrastive training of the disease retriever.

    DATA rows: {"anchor": str, "positives": [id], "negatives": [id]}.
    """
    knowledge = KnowledgeBase.load(kb_path)
    batches = [
        ContrastiveBatch(
            anchor=r["anchor"],
            positives=tuple(r["positives"]),
            negatives=tuple(r.get("negatives") or ()),
        )
        for r in _read_jsonl(data)
    ]
    model = EncoderModel(dim_in=dim_in, dim_out=dim_out, seed=seed)
    config = TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    result = train_retriever(model, batches, config, knowledge)
    model.save(out)
    _write_loss_reports(result.epoch_losses, out)
    click.echo(f"trained retriever on {len(batches)} examples, saved to {out}")
    if result.epoch_losses:
        click.echo(f"epoch losses: {', '.join(f'{v:.4f}' for v in result.epoch_losses)}")


@train.command("ranker")
@_train_options
def train_ranker_cmd(data, kb_path, out, epochs, seed, lr, batch_size, dim_in, dim_out) -> None:
    """Contrastive training of the disease priority ranker.

    DATA rows: {"history": str, "positives": [id], "negatives": [id]}.
    """
    knowledge = KnowledgeBase.load(kb_path)
    turns = [
        RankTurn(
            history=r["history"],
            positives=tuple(r["positives"]),
            negatives=tuple(r.get("negatives") or ()),
        )
        for r in _read_jsonl(data)
    ]
    model = RankerModel(dim_in=dim_in, dim_out=dim_out, seed=seed)
    config = TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    result = train_ranker(model, turns, config, knowledge)
    model.save(out)
    _write_loss_reports(result.epoch_losses, out)
    click.echo(
        f"trained ranker on {len(turns) - result.skipped_turns} turns "
        f"({result.skipped_turns} skipped for empty negatives), saved to {out}"
    )


@main.command("annotate")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--retriever", "retriever_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def annotate_cmd(data, kb_path, backend_path, retriever_path, out) -> None:
    """Annotate corpus dialogues with disease lists and thought processes.

    DATA rows: {"id": str, "turns": [{"patient": str, "doctor": str}]}.
    """
    knowledge = KnowledgeBase.load(kb_path)
    backend = load_backend_file(backend_path)
    model = EncoderModel.load(retriever_path) if retriever_path else EncoderModel(seed=0)
    exemplars = load_exemplars()
    catalog = TemplateCatalog.load_default()
    records = []
    for row in _read_jsonl(data):
        dialogue = dialogue_from_record(row)
        records.extend(annotate_dialogue(dialogue, model, knowledge, backend, catalog, exemplars))
    write_corpus_jsonl(records, out)
    click.echo(f"annotated {len(records)} turns into {out}")


@main.group("eval")
def eval_group() -> None:
    """Evaluation reports (table + figure)."""


@eval_group.command("recall")
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))
@click.option("--eval", "eval_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ks", default="10,25,50,100", show_default=True)
@click.option("--per-turn", is_flag=True, help="Average per query instead of per gold disease.")
@click.option("--out-dir", type=click.Path(file_okay=False))
def eval_recall(model_path, kb_path, eval_path, ks, per_turn, out_dir) -> None:
    """Recall@K of gold diseases; EVAL rows: {"query": str, "gold": [id]}."""
    knowledge = KnowledgeBase.load(kb_path)
    model = EncoderModel.load(model_path) if model_path else EncoderModel(seed=0)
    eval_set = [(r["query"], list(r["gold"])) for r in _read_jsonl(eval_path)]
    k_values = [int(k) for k in ks.split(",") if k.strip()]
    table = recall_at_k(
        model, knowledge, eval_set, k_values, mode="per-turn" if per_turn else "micro"
    )
    header, row = reporting.format_recall_rows(table)
    click.echo("\t".join(header))
    click.echo("\t".join(row))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reporting.recall_table_tsv(table, out / "recall.tsv")
        reporting.recall_figure(table, out / "recall.png")
        click.echo(f"wrote {out / 'recall.tsv'} and {out / 'recall.png'}")


@eval_group.command("generation")
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gold", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(file_okay=False))
def eval_generation(pred, gold, kb_path, out_dir) -> None:
    """Generation metrics; PRED/GOLD rows: {"response": str}, aligned by line."""
    knowledge = KnowledgeBase.load(kb_path)
    lexicon = EntityLexicon.from_kb(knowledge)
    outputs = [r["response"] for r in _read_jsonl(pred)]
    references = [r["response"] for r in _read_jsonl(gold)]
    report = evaluate_run(outputs, references, lexicon)
    keys = ["B-1", "B-4", "R-1", "R-2", "E-F"]
    click.echo("\t".join(keys))
    click.echo("\t".join(f"{100.0 * report.scores[k]:.2f}" for k in keys))
    click.echo(f"tokenizer={report.tokenizer_id} lexicon={report.lexicon_digest}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reporting.generation_table_tsv(report, out / "generation.tsv")
        reporting.generation_figure(report, out / "generation.png")
        (out / "generation.json").write_text(
            json.dumps(report.to_dict(), indent=2), encoding="utf-8"
        )
        click.echo(f"wrote {out / 'generation.tsv'} and {out / 'generation.png'}")


def _engine_options(fn):
    fn = click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--retriever", "retriever_path", type=click.Path(exists=True))(fn)
    fn = click.option("--ranker", "ranker_path", type=click.Path(exists=True))(fn)
    fn = click.option("--groups", default=5, show_default=True, help="Refinement batch groups (B).")(fn)
    fn = click.option("--batch-size", default=10, show_default=True, help="Candidates per batch (G).")(fn)
    fn = click.option("--k-retrieve", default=50, show_default=True)(fn)
    fn = click.option("--k-discuss", default=5, show_default=True)(fn)
    fn = click.option("--plan-seed", default=0, show_default=True)(fn)
    return fn


def _build_engine(kb_path, backend_path, retriever_path, ranker_path, groups, batch_size,
                  k_retrieve, k_discuss, plan_seed, store_dir=None) -> Engine:
    config = EngineConfig(
        k_retrieve=k_retrieve,
        refine_batch_size=batch_size,
        refine_groups=groups,
        k_discuss=k_discuss,
        plan_seed=plan_seed,
    )
    return engine_from_paths(
        kb_path,
        backend_path,
        retriever_path=retriever_path,
        ranker_path=ranker_path,
        config=config,
        store_dir=store_dir,
    )


@main.command("chat")
@_engine_options
@click.option("--session-id", default=None, help="Fixed session id (default: random).")
@click.option("--show-trace", is_flag=True, help="Print a stage summary after each turn.")
def chat_cmd(kb_path, backend_path, retriever_path, ranker_path, groups, batch_size,
             k_retrieve, k_discuss, plan_seed, session_id, show_trace) -> None:
    """Terminal consultation REPL: type patient utterances, read responses."""
    engine = _build_engine(kb_path, backend_path, retriever_path, ranker_path, groups,
                           batch_size, k_retrieve, k_discuss, plan_seed)
    session = engine.new_session(session_id)
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text in ("/quit", "/exit"):
            break
        try:
            trace = engine.step(session, text)
        except Exception as exc:
            click.echo(f"[turn failed: {exc}]", err=True)
            continue
        if show_trace:
            click.echo(f"[findings: {len(trace.findings)} | refined: {len(trace.refined)} "
                       f"| ranked: {len(trace.ranked)} | steps: {len(trace.thought_steps)}]")
        click.echo(f"Doctor: {trace.response}")


@main.command("serve")
@_engine_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8700, show_default=True)
@click.option("--store", "store_dir", type=click.Path(file_okay=False),
              help="Directory for the session event log.")
def serve_cmd(kb_path, backend_path, retriever_path, ranker_path, groups, batch_size,
              k_retrieve, k_discuss, plan_seed, host, port, store_dir) -> None:
    """Serve the HTTP API consumed by the web console."""
    import uvicorn

    engine = _build_engine(kb_path, backend_path, retriever_path, ranker_path, groups,
                           batch_size, k_retrieve, k_discuss, plan_seed, store_dir=store_dir)
    uvicorn.run(create_app(engine), host=host, port=port)


if __name__ == "__main__":
    main()
