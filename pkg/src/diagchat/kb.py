"""Disease knowledge base: ingestion, storage, and lookup of disease documents.

Documents arrive as JSONL (one disease per line) and are kept in an
in-memory id-keyed index backed by an embedded SQLite file. Duplicate ids
are rejected (the later record loses) so ingestion order can never silently
change corpus content.
"""

from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class IngestError(ValueError):
    """A source line could not be parsed into a disease document."""


@dataclass(frozen=True)
class DiseaseDoc:
    """One disease document.

    ``diagnosis_knowledge`` is the text used to ground refinement and
    relation-analysis prompts; ``description`` is general free text.
    """

    id: str
    name: str
    aliases: tuple[str, ...] = ()
    description: str = ""
    diagnosis_knowledge: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("disease doc requires a non-empty id")
        if not self.name:
            raise ValueError(f"disease doc {self.id!r} requires a non-empty name")
        if len(set(self.aliases)) != len(self.aliases):
            raise ValueError(f"disease doc {self.id!r} has duplicate aliases")

    def full_text(self) -> str:
        """All textual content, used as the document side of retrieval."""
        parts = [self.name, *self.aliases, self.description, self.diagnosis_knowledge]
        return "; ".join(p for p in parts if p)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "aliases": list(self.aliases),
            "description": self.description,
            "diagnosis_knowledge": self.diagnosis_knowledge,
        }

    @classmethod
    def from_record(cls, record: dict) -> "DiseaseDoc":
        return cls(
            id=str(record["id"]),
            name=str(record["name"]),
            aliases=tuple(record.get("aliases") or ()),
            description=str(record.get("description") or ""),
            diagnosis_knowledge=str(record.get("diagnosis_knowledge") or ""),
        )


@dataclass(frozen=True)
class Rejection:
    line_no: int
    doc_id: str
    reason: str


class KnowledgeBase:
    """Id-keyed disease document collection.

    Read-safe from multiple threads once ingestion is done; mutation is
    single-writer. ``version`` increases on every mutation.
    """

    def __init__(self) -> None:
        self._docs: dict[str, DiseaseDoc] = {}
        self.version = 0

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __iter__(self) -> Iterator[DiseaseDoc]:
        """Docs in ascending id order, so downstream ordering is stable."""
        for doc_id in sorted(self._docs):
            yield self._docs[doc_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return self._docs == other._docs

    def ids(self) -> list[str]:
        return sorted(self._docs)

    def add(self, doc: DiseaseDoc) -> bool:
        """Insert a doc; returns False without overwriting if the id exists."""
        if doc.id in self._docs:
            return False
        self._docs[doc.id] = doc
        self.version += 1
        return True

    def get(self, doc_id: str) -> DiseaseDoc | None:
        return self._docs.get(doc_id)

    def require(self, doc_id: str) -> DiseaseDoc:
        doc = self._docs.get(doc_id)
        if doc is None:
            raise KeyError(f"unknown disease id {doc_id!r}")
        return doc

    def save(self, path: str | Path) -> None:
        """Persist to an embedded SQLite file (full rewrite)."""
        path = Path(path)
        if path.exists():
            path.unlink()
        con = sqlite3.connect(path)
        try:
            con.execute("CREATE TABLE docs (id TEXT PRIMARY KEY, record TEXT NOT NULL)")
            con.execute("CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT NOT NULL)")
            con.executemany(
                "INSERT INTO docs (id, record) VALUES (?, ?)",
                [(doc.id, json.dumps(doc.to_record(), ensure_ascii=False)) for doc in self],
            )
            con.execute("INSERT INTO meta VALUES ('version', ?)", (str(self.version),))
            con.commit()
        finally:
            con.close()

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        con = sqlite3.connect(path)
        try:
            kb = cls()
            for (record,) in con.execute("SELECT record FROM docs ORDER BY id"):
                kb.add(DiseaseDoc.from_record(json.loads(record)))
            row = con.execute("SELECT value FROM meta WHERE key='version'").fetchone()
            if row is not None:
                kb.version = int(row[0])
            return kb
        finally:
            con.close()


@dataclass
class IngestResult:
    """Outcome of one ingestion run: the KB, how many records were stored,
    and the per-record rejection report for duplicate ids."""

    kb: KnowledgeBase
    count: int = 0
    rejections: list[Rejection] = field(default_factory=list)


def ingest(lines: Iterable[str]) -> IngestResult:
    """Build a fresh KnowledgeBase from a JSONL document stream.

    A malformed line aborts with an error naming the line number; a
    duplicate id rejects the later record and is reported, not raised.
    """
    result = IngestResult(kb=KnowledgeBase())
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise IngestError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise IngestError(f"line {line_no}: expected a JSON object")
        try:
            doc = DiseaseDoc.from_record(record)
        except (KeyError, ValueError) as exc:
            raise IngestError(f"line {line_no}: {exc}") from exc
        if result.kb.add(doc):
            result.count += 1
        else:
            result.rejections.append(Rejection(line_no, doc.id, "duplicate id"))
    return result


def ingest_file(path: str | Path) -> IngestResult:
    with open(path, encoding="utf-8") as fh:
        return ingest(fh)
