"""Session orchestration: the full per-turn pipeline, persistence, and the
HTTP API used by the console.

A turn runs extract findings -> retrieve candidates -> vote refinement ->
relation analysis -> memory append -> priority ranking -> thought prompt ->
thought generation. Failures abort the turn and leave the session exactly
as it was; successful turns are appended atomically.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

try:
    from importlib.resources import files as _resource_files
except ImportError:  # pragma: no cover
    from importlib_resources import files as _resource_files

from pydantic import BaseModel

from . import abductive, alignment, deductive
from .abductive import Finding
from .deductive import DiagnosisMemory, RelationEntry
from .dialogue import DialogueHistory
from .encoder import EncoderModel, RankerModel
from .kb import KnowledgeBase
from .llm import TemplateCatalog, load_backend_file
from .retrieval import Retriever

PIPELINE_STAGES = (
    "extract_findings",
    "retrieve",
    "refine",
    "analyze",
    "append_memory",
    "rank",
    "build_thought_prompt",
    "generate_thought",
)


@dataclass(frozen=True)
class EngineConfig:
    """Per-session pipeline knobs; immutable once a session exists."""

    k_retrieve: int = 50
    refine_batch_size: int = 10  # G
    refine_groups: int = 5  # B
    k_discuss: int = 5  # K''
    plan_seed: int = 0
    past_char_budget: int = 4000
    prune_opposed: bool = False
    exemplar_count: int = 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        return cls(**data)


@dataclass
class TurnTrace:
    """Everything one turn produced, in pipeline order."""

    turn: int
    patient: str
    findings: list[dict]
    votes: dict
    refined: list[str]
    memory_delta: list[dict]
    ranked: list[dict]
    thought_steps: list[str]
    response: str
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        data = {
            "turn": self.turn,
            "patient": self.patient,
            "findings": self.findings,
            "votes": self.votes,
            "refined": self.refined,
            "memory_delta": self.memory_delta,
            "ranked": self.ranked,
            "thought_steps": self.thought_steps,
            "response": self.response,
        }
        if include_timings:
            data["timings"] = self.timings
        return data

    def canonical_json(self) -> str:
        """Deterministic serialization: timings excluded, keys sorted."""
        return json.dumps(self.to_dict(include_timings=False), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> "TurnTrace":
        return cls(
            turn=data["turn"],
            patient=data["patient"],
            findings=data["findings"],
            votes=data["votes"],
            refined=data["refined"],
            memory_delta=data["memory_delta"],
            ranked=data["ranked"],
            thought_steps=data["thought_steps"],
            response=data["response"],
            timings=data.get("timings", {}),
        )


@dataclass
class Session:
    id: str
    config: EngineConfig
    history: DialogueHistory = field(default_factory=DialogueHistory)
    memory: DiagnosisMemory = field(default_factory=DiagnosisMemory)
    traces: list[TurnTrace] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    past_findings: list[Finding] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "config": self.config.to_dict(),
            "history": [{"role": u.role, "text": u.text} for u in self.history.utterances],
            "memory": [e.to_record() for e in self.memory],
            "traces": [t.to_dict() for t in self.traces],
            "errors": list(self.errors),
        }


class StageError(RuntimeError):
    """A pipeline stage failed; the turn was rolled back."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_exemplars(count: int = 3) -> list[str]:
    root = _resource_files("diagchat") / "exemplars"
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".txt"))
    return [(root / name).read_text(encoding="utf-8").strip() for name in names[:count]]


class Engine:
    """Holds the models, knowledge base, backend, and session registry."""

    def __init__(
        self,
        kb: KnowledgeBase,
        retriever_model: EncoderModel,
        ranker_model: RankerModel,
        backend,
        config: EngineConfig | None = None,
        catalog: TemplateCatalog | None = None,
        exemplars: Sequence[str] | None = None,
        store: "SessionStore | None" = None,
    ):
        self.kb = kb
        self.retriever_model = retriever_model
        self.ranker_model = ranker_model
        self.backend = backend
        self.config = config or EngineConfig()
        self.catalog = catalog or TemplateCatalog.load_default()
        self.exemplars = list(
            exemplars if exemplars is not None else load_exemplars(self.config.exemplar_count)
        )
        self.retriever = Retriever(retriever_model, kb)
        self.store = store
        self.sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        if store is not None:
            self.sessions = store.load()
            for session_id in self.sessions:
                self._locks[session_id] = threading.Lock()

    def new_session(self, session_id: str | None = None) -> Session:
        session_id = session_id or uuid.uuid4().hex
        with self._registry_lock:
            if session_id in self.sessions:
                raise ValueError(f"session {session_id!r} already exists")
            session = Session(id=session_id, config=self.config)
            self.sessions[session_id] = session
            self._locks[session_id] = threading.Lock()
        if self.store is not None:
            self.store.record_created(session)
        return session

    def get_session(self, session_id: str) -> Session | None:
        return self.sessions.get(session_id)

    def message(self, session_id: str, text: str) -> TurnTrace:
        """Serialized per-session turn execution."""
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(f"unknown session {session_id!r}")
        with self._locks[session_id]:
            trace = self.step(session, text)
            # recorded under the lock so the event log preserves turn order
            if self.store is not None:
                self.store.record_turn(session, trace)
        return trace

    def step(self, session: Session, patient_text: str) -> TurnTrace:
        """Run one full turn. On any stage failure the session is left
        bit-identical to its pre-turn state and an error trace is retained."""
        if not patient_text or not patient_text.strip():
            raise ValueError("patient utterance must be non-empty")
        turn = len(session.traces) + 1
        cfg = session.config
        timings: dict[str, float] = {}
        stage = PIPELINE_STAGES[0]

        def tick(name: str, started: float) -> None:
            timings[name] = time.perf_counter() - started

        try:
            stage = "extract_findings"
            started = time.perf_counter()
            findings = abductive.extract_findings(
                self.backend, (session.history.last_doctor(), patient_text), turn, self.catalog
            )
            tick(stage, started)

            stage = "retrieve"
            started = time.perf_counter()
            retrieved = self.retriever.top_k(findings.query_text(), cfg.k_retrieve)
            candidates = retrieved.ids()
            tick(stage, started)

            stage = "refine"
            started = time.perf_counter()
            plan = abductive.plan_batch_groups(
                candidates,
                cfg.refine_batch_size,
                cfg.refine_groups,
                seed=cfg.plan_seed + turn,
            )
            refinement = abductive.refine(
                self.backend,
                findings,
                session.past_findings,
                plan,
                self.kb,
                self.catalog,
                past_char_budget=cfg.past_char_budget,
            )
            tick(stage, started)

            stage = "analyze"
            started = time.perf_counter()
            relations = deductive.analyze(
                self.backend, findings, refinement.refined, self.kb, self.catalog
            )
            tick(stage, started)

            stage = "append_memory"
            started = time.perf_counter()
            prompt_memory = session.memory.copy().append(relations)
            tick(stage, started)

            stage = "rank"
            started = time.perf_counter()
            prompt_history = session.history.copy()
            prompt_history.add_patient(patient_text)
            rank_pool = refinement.refined
            if cfg.prune_opposed:
                opposed = {e.disease for e in relations if e.status == "oppose"}
                kept = tuple(d for d in rank_pool.diseases if d not in opposed)
                rank_pool = replace(rank_pool, diseases=kept)
            if rank_pool.diseases:
                ranking = alignment.rank(
                    self.ranker_model, prompt_history, rank_pool, self.kb, k_cut=cfg.k_discuss
                )
            else:
                ranking = alignment.PriorityRanking(ranked=[], k_cut=cfg.k_discuss)
            tick(stage, started)

            stage = "build_thought_prompt"
            started = time.perf_counter()
            names = {doc_id: self.kb.require(doc_id).name for doc_id in refinement.refined.diseases}
            prompt = alignment.build_thought_prompt(
                prompt_history,
                prompt_memory,
                ranking.top(),
                self.exemplars,
                self.catalog.get("thought_cot"),
                names=names,
            )
            tick(stage, started)

            stage = "generate_thought"
            started = time.perf_counter()
            thought = alignment.generate_thought(self.backend, prompt)
            tick(stage, started)
        except Exception as exc:
            session.errors.append({"turn": turn, "stage": stage, "error": str(exc)})
            raise StageError(stage, exc) from exc

        trace = TurnTrace(
            turn=turn,
            patient=patient_text,
            findings=[{"text": f.text, "soap": f.soap} for f in findings.findings],
            votes={
                "votes": dict(sorted(refinement.tally.votes.items())),
                "groups": refinement.tally.n_groups,
                "threshold": refinement.tally.n_groups / 2.0,
            },
            refined=list(refinement.refined.diseases),
            memory_delta=[e.to_record() for e in relations],
            ranked=[
                {"id": doc_id, "name": self.kb.require(doc_id).name, "score": score}
                for doc_id, score in ranking.ranked
            ],
            thought_steps=list(thought.steps),
            response=thought.response,
            timings=timings,
        )

        session.history.add_patient(patient_text)
        session.history.add_doctor(thought.response)
        session.memory.append(relations)
        session.past_findings.extend(findings.findings)
        session.traces.append(trace)
        return trace


class SessionStore:
    """Append-only JSONL event log plus periodic snapshots; loading replays
    the snapshot and then the tail of the log."""

    def __init__(self, directory: str | Path, snapshot_every: int = 20):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.events_path = self.directory / "events.jsonl"
        self.snapshot_path = self.directory / "snapshot.json"
        self.snapshot_every = snapshot_every
        self._write_lock = threading.Lock()
        self._event_count = self._count_events()
        self._sessions_cache: dict[str, Session] = {}

    def _count_events(self) -> int:
        if not self.events_path.exists():
            return 0
        with open(self.events_path, encoding="utf-8") as fh:
            return sum(1 for line in fh if line.strip())

    def _append_event(self, event: dict) -> None:
        with self._write_lock:
            with open(self.events_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, ensure_ascii=False) + "\n")
            self._event_count += 1
            if self.snapshot_every and self._event_count % self.snapshot_every == 0:
                self._snapshot_locked()

    def record_created(self, session: Session) -> None:
        self._sessions_cache[session.id] = session
        self._append_event(
            {"type": "created", "session_id": session.id, "config": session.config.to_dict()}
        )

    def record_turn(self, session: Session, trace: TurnTrace) -> None:
        self._sessions_cache[session.id] = session
        self._append_event(
            {
                "type": "turn",
                "session_id": session.id,
                "trace": trace.to_dict(include_timings=True),
            }
        )

    def snapshot(self) -> None:
        with self._write_lock:
            self._snapshot_locked()

    def _snapshot_locked(self) -> None:
        payload = {
            "event_count": self._event_count,
            "sessions": {sid: s.to_dict() for sid, s in self._sessions_cache.items()},
        }
        tmp = self.snapshot_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        tmp.replace(self.snapshot_path)

    def load(self) -> dict[str, Session]:
        sessions: dict[str, Session] = {}
        replay_from = 0
        if self.snapshot_path.exists():
            payload = json.loads(self.snapshot_path.read_text(encoding="utf-8"))
            replay_from = int(payload.get("event_count", 0))
            for sid, data in payload.get("sessions", {}).items():
                sessions[sid] = _session_from_dict(data)
        if self.events_path.exists():
            with open(self.events_path, encoding="utf-8") as fh:
                for index, line in enumerate(fh):
                    if not line.strip() or index < replay_from:
                        continue
                    _apply_event(sessions, json.loads(line))
        self._sessions_cache = sessions
        return sessions


def _session_from_dict(data: dict) -> Session:
    session = Session(id=data["id"], config=EngineConfig.from_dict(data["config"]))
    for utterance in data.get("history", []):
        if utterance["role"] == "patient":
            session.history.add_patient(utterance["text"])
        else:
            session.history.add_doctor(utterance["text"])
    session.memory.append([RelationEntry.from_record(r) for r in data.get("memory", [])])
    for trace_data in data.get("traces", []):
        trace = TurnTrace.from_dict(trace_data)
        session.traces.append(trace)
        for f in trace.findings:
            session.past_findings.append(Finding(text=f["text"], soap=f["soap"], turn=trace.turn))
    session.errors = list(data.get("errors", []))
    return session


def _apply_event(sessions: dict[str, Session], event: dict) -> None:
    if event["type"] == "created":
        sid = event["session_id"]
        sessions[sid] = Session(id=sid, config=EngineConfig.from_dict(event["config"]))
    elif event["type"] == "turn":
        session = sessions.get(event["session_id"])
        if session is None:
            return
        trace = TurnTrace.from_dict(event["trace"])
        session.history.add_patient(trace.patient)
        session.history.add_doctor(trace.response)
        session.memory.append([RelationEntry.from_record(r) for r in trace.memory_delta])
        for f in trace.findings:
            session.past_findings.append(Finding(text=f["text"], soap=f["soap"], turn=trace.turn))
        session.traces.append(trace)


class MessageBody(BaseModel):
    text: str


def create_app(engine: Engine):
    """FastAPI app exposing the session endpoints; CORS open for the console."""
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="diagchat", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"errors": exc.errors()})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions")
    def create_session():
        session = engine.new_session()
        return {"id": session.id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        session = engine.get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "unknown session"})
        return session.to_dict()

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, body: MessageBody):
        if engine.get_session(session_id) is None:
            return JSONResponse(status_code=404, content={"error": "unknown session"})
        try:
            trace = engine.message(session_id, body.text)
        except StageError as exc:
            return JSONResponse(
                status_code=502, content={"error": str(exc), "stage": exc.stage}
            )
        except ValueError as exc:
            return JSONResponse(status_code=400, content={"error": str(exc)})
        return trace.to_dict()

    @app.get("/sessions/{session_id}/trace/{turn}")
    def get_trace(session_id: str, turn: int):
        session = engine.get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "unknown session"})
        if turn < 1 or turn > len(session.traces):
            return JSONResponse(status_code=404, content={"error": "unknown turn"})
        return session.traces[turn - 1].to_dict()

    return app


def engine_from_paths(
    kb_path: str | Path,
    backend_config_path: str | Path,
    retriever_path: str | Path | None = None,
    ranker_path: str | Path | None = None,
    config: EngineConfig | None = None,
    store_dir: str | Path | None = None,
) -> Engine:
    """Assemble an engine from on-disk artifacts; missing model paths fall
    back to untrained seed-0 models."""
    kb = KnowledgeBase.load(kb_path)
    retriever_model = EncoderModel.load(retriever_path) if retriever_path else EncoderModel(seed=0)
    ranker_model = RankerModel.load(ranker_path) if ranker_path else RankerModel(seed=0)
    backend = load_backend_file(backend_config_path)
    store = SessionStore(store_dir) if store_dir else None
    return Engine(
        kb=kb,
        retriever_model=retriever_model,
        ranker_model=ranker_model,
        backend=backend,
        config=config,
        store=store,
    )
