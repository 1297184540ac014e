"""Delimited report tables and the matplotlib figures rendered next to them."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport
from .retrieval import RecallTable


def write_tsv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = ["\t".join(str(cell) for cell in header)]
    lines.extend("\t".join(str(cell) for cell in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_recall_rows(table: RecallTable) -> tuple[list[str], list[str]]:
    ks = sorted(table.recall)
    header = [f"Top-{k}" for k in ks]
    row = [f"{table.as_percent()[k]:.2f}%" for k in ks]
    return header, row


def recall_table_tsv(table: RecallTable, path: str | Path) -> None:
    header, row = format_recall_rows(table)
    write_tsv(path, header, [row])


def recall_figure(table: RecallTable, path: str | Path) -> None:
    ks = sorted(table.recall)
    values = [table.as_percent()[k] for k in ks]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, values, marker="o")
    ax.set_xlabel("K")
    ax.set_ylabel("recall@K (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"Disease retrieval recall ({table.mode}, n={table.n_pairs})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def generation_table_tsv(report: EvalReport, path: str | Path) -> None:
    keys = ["B-1", "B-4", "R-1", "R-2", "E-F"]
    write_tsv(path, keys, [[f"{100.0 * report.scores[k]:.2f}" for k in keys]])


def generation_figure(report: EvalReport, path: str | Path) -> None:
    keys = ["B-1", "B-4", "R-1", "R-2", "E-F"]
    values = [100.0 * report.scores[k] for k in keys]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(keys, values, color="#4878a8")
    ax.set_ylabel("score (%)")
    ax.set_title(f"Generation metrics over {report.n_turns} turns")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def loss_table_tsv(losses: Sequence[float], path: str | Path) -> None:
    write_tsv(path, ["epoch", "mean_loss"], [[i + 1, f"{v:.6f}"] for i, v in enumerate(losses)])


def loss_figure(losses: Sequence[float], path: str | Path, title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(losses) + 1), losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
