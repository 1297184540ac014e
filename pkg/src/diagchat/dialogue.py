"""Dialogue data model shared across the pipeline and the annotation tools."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Utterance:
    role: str  # "patient" or "doctor"
    text: str

    def __post_init__(self) -> None:
        if self.role not in ("patient", "doctor"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class DialogueHistory:
    """Ordered utterances of one consultation."""

    utterances: list[Utterance] = field(default_factory=list)

    def add_patient(self, text: str) -> None:
        self.utterances.append(Utterance("patient", text))

    def add_doctor(self, text: str) -> None:
        self.utterances.append(Utterance("doctor", text))

    def last_doctor(self) -> str | None:
        for utterance in reversed(self.utterances):
            if utterance.role == "doctor":
                return utterance.text
        return None

    def as_text(self) -> str:
        """Transcript rendering used in prompts and ranker inputs."""
        return "\n".join(f"{u.role.capitalize()}: {u.text}" for u in self.utterances)

    def copy(self) -> "DialogueHistory":
        return DialogueHistory(list(self.utterances))


@dataclass
class DialogueTurn:
    """One (patient, doctor) exchange of a corpus dialogue. The doctor side
    may carry gold disease annotations when the corpus provides them."""

    patient: str
    doctor: str
    gold_diseases: tuple[str, ...] = ()


@dataclass
class Dialogue:
    id: str
    turns: list[DialogueTurn] = field(default_factory=list)

    def history_before(self, turn_index: int) -> DialogueHistory:
        """History up to and including the patient utterance of ``turn_index``
        (0-based), excluding that turn's doctor response."""
        history = DialogueHistory()
        for i, turn in enumerate(self.turns[: turn_index + 1]):
            history.add_patient(turn.patient)
            if i < turn_index:
                history.add_doctor(turn.doctor)
        return history


def dialogue_from_record(record: dict) -> Dialogue:
    turns = [
        DialogueTurn(
            patient=str(t["patient"]),
            doctor=str(t.get("doctor", "")),
            gold_diseases=tuple(t.get("gold_diseases") or ()),
        )
        for t in record.get("turns", [])
    ]
    return Dialogue(id=str(record["id"]), turns=turns)
