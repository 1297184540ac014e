"""Shared test support: fixture knowledge bases, a deterministic scripted
responder for the mock backend, synthetic corpora for the retrieval and
ranking experiments, and a finite-difference gradient checker."""

from __future__ import annotations

import re

import numpy as np

from diagchat.kb import DiseaseDoc, KnowledgeBase
from diagchat.textproc import normalize, word_tokens

FIXTURE_DOCS = [
    DiseaseDoc(
        id="d1",
        name="gastritis",
        aliases=("stomach inflammation",),
        description="inflammation of the stomach lining causing burning pain and nausea",
        diagnosis_knowledge="burning stomach pain after meals; nausea; worse with spicy food",
    ),
    DiseaseDoc(
        id="d2",
        name="allergic pharyngitis",
        aliases=("throat allergy",),
        description="allergic irritation of the throat with itching and gagging",
        diagnosis_knowledge="itchy throat; gagging; triggered by dust or seasonal changes",
    ),
    DiseaseDoc(
        id="d3",
        name="enteritis",
        aliases=("bowel inflammation",),
        description="inflammation of the intestine with diarrhea and cramps",
        diagnosis_knowledge="watery diarrhea; abdominal cramps; sometimes fever",
    ),
    DiseaseDoc(
        id="d4",
        name="reflux esophagitis",
        aliases=("acid reflux", "GERD"),
        description="acid injury of the esophagus with heartburn and regurgitation",
        diagnosis_knowledge="heartburn after meals; sour regurgitation; worse lying down",
    ),
    DiseaseDoc(
        id="d5",
        name="migraine",
        aliases=("sick headache",),
        description="recurrent throbbing headache often with nausea and light sensitivity",
        diagnosis_knowledge="one sided throbbing headache; photophobia; nausea",
    ),
]


def make_kb(docs=None) -> KnowledgeBase:
    kb = KnowledgeBase()
    for doc in docs if docs is not None else FIXTURE_DOCS:
        kb.add(doc)
    return kb


_TEMPLATE_TAG_RE = re.compile(r"\[template: (\w+) v(\d+)\]\s*$")
_CANDIDATE_ID_RE = re.compile(r"^- id: (\S+) \| name: ([^|]+?) \|", re.MULTILINE)
_MATCH_CANDIDATE_RE = re.compile(r"^- id: (\S+) \| name: ([^|\n]+?)(?:\s*\| aliases: (.*))?$", re.MULTILINE)
_FINDING_LINE_RE = re.compile(r"^- \[(\w+)\] (.+?)(?: \(turn \d+\))?$", re.MULTILINE)


class ScriptedClinicBackend:
    """Deterministic stand-in for a clinical LLM.

    Dispatches on the template tag that prompt rendering appends, and
    derives every answer from the prompt text alone, so identical inputs
    always produce identical outputs. Used as the mock backend's default
    responder in end-to-end tests.
    """

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self.calls: list[str] = []
        self.thought_texts: list[str] = []

    def __call__(self, prompt: str) -> str:
        match = _TEMPLATE_TAG_RE.search(prompt)
        if not match:
            raise AssertionError("prompt lacks a template tag")
        name = match.group(1)
        self.calls.append(name)
        handler = getattr(self, f"_{name}")
        return handler(prompt)

    # -- stage handlers -------------------------------------------------

    def _soap_extract(self, prompt: str) -> str:
        patient = ""
        for line in prompt.splitlines():
            if line.startswith("Patient: "):
                patient = line[len("Patient: ") :]
        phrases = [p.strip() for p in re.split(r"[.;,]", patient) if p.strip()]
        lines = [f"S: {phrase}" for phrase in phrases[:3]] or [f"S: {patient.strip()}"]
        lines.append("O: no examination performed")
        return "\n".join(lines)

    def _findings_tokens(self, prompt: str) -> set[str]:
        section = prompt.split("New clinical findings:", 1)[1].split("Past findings:", 1)[0]
        tokens: set[str] = set()
        for match in _FINDING_LINE_RE.finditer(section):
            tokens.update(word_tokens(match.group(2)))
        return tokens

    def _abductive_refine(self, prompt: str) -> str:
        tokens = self._findings_tokens(prompt)
        lines = []
        for doc_id, name in _CANDIDATE_ID_RE.findall(prompt):
            doc = self.kb.require(doc_id)
            doc_tokens = set(word_tokens(doc.name)) | set(word_tokens(doc.diagnosis_knowledge))
            if tokens & doc_tokens:
                lines.append(f"disease: {doc_id} | explanation: findings overlap {name.strip()}")
        return "\n".join(lines) if lines else "none"

    def _deductive_analyze(self, prompt: str) -> str:
        findings_section = prompt.split("New clinical findings:", 1)[1].split(
            "Possible diseases", 1
        )[0]
        findings = [m.group(2) for m in _FINDING_LINE_RE.finditer(findings_section)]
        diseases = _CANDIDATE_ID_RE.findall(prompt)
        lines = []
        for finding in findings:
            f_tokens = set(word_tokens(finding))
            for doc_id, _ in diseases:
                doc = self.kb.require(doc_id)
                d_tokens = set(word_tokens(doc.name)) | set(word_tokens(doc.diagnosis_knowledge))
                status = "support" if f_tokens & d_tokens else "irrelevant"
                reason = "shares findings vocabulary" if status == "support" else "no overlap"
                lines.append(
                    f"finding: {finding} | disease: {doc_id} | status: {status} | rationale: {reason}"
                )
        return "\n".join(lines)

    def _thought_cot(self, prompt: str) -> str:
        target = prompt.split("The next response will discuss:", 1)[1]
        gold = re.search(r'The doctor actually responded: "(.+?)"', prompt, re.DOTALL)
        if gold:
            response = gold.group(1)
            steps = [
                "1. The dialogue context narrows the presentation to a specific concern.",
                "2. The recorded analyses leave one line of questioning open.",
                f"3. Addressing it directly leads to the documented reply.",
            ]
        else:
            first = re.search(r"^- ([^(|]+?) \(score", target, re.MULTILINE)
            topic = first.group(1).strip() if first else "the reported symptoms"
            steps = [
                f"1. The newest findings are most consistent with {topic}.",
                "2. The diagnosis memory shows which findings support that candidate.",
                f"3. Asking a targeted question about {topic} will confirm or exclude it.",
            ]
            response = f"Let us talk about {topic}. When did these symptoms last occur?"
        text = "\n".join(steps) + f'\nTherefore, the doctor responds, "{response}"'
        self.thought_texts.append(text)
        return text

    def _history_names(self, text: str) -> list[str]:
        tokens = set(word_tokens(text))
        names = []
        for doc in self.kb:
            vocab = set(word_tokens(doc.name)) | set(word_tokens(doc.diagnosis_knowledge))
            if tokens & vocab:
                names.append(doc.name)
        return names

    def _annotate_pri(self, prompt: str) -> str:
        history = prompt.split("Medical conversation:", 1)[1]
        names = self._history_names(history)
        if not names:
            return "1. unspecified viral illness | reason: nothing specific reported"
        return "\n".join(
            f"{i}. {name} | reason: history mentions related findings"
            for i, name in enumerate(names, start=1)
        )

    def _annotate_post(self, prompt: str) -> str:
        return self._annotate_pri(prompt)

    def _disease_match(self, prompt: str) -> str:
        mention = prompt.split("Target disease:", 1)[1].split("Candidate disease list:", 1)[0]
        mention_norm = normalize(mention)
        for doc_id, name, aliases in _MATCH_CANDIDATE_RE.findall(prompt):
            surfaces = [name.strip()] + [a.strip() for a in (aliases or "").split(",") if a.strip()]
            if any(normalize(s) == mention_norm for s in surfaces):
                return doc_id
        return "none"


# -- synthetic corpora ----------------------------------------------------

SITES = [
    "stomach", "bowel", "liver", "kidney", "skin", "chest", "throat", "joint",
    "nerve", "heart", "lung", "ear", "eye", "bladder", "spine",
]
ROOTS = [
    "gastr", "enter", "hepat", "nephr", "derm", "bronch", "rhin", "arthr",
    "neur", "card", "pulmon", "ot", "ophthalm", "cyst", "myel",
]
SUFFIXES = ["itis", "osis", "opathy", "algia", "odynia"]
SYMPTOMS = [
    "fever", "nausea", "fatigue", "rash", "cough", "pain", "swelling", "dizziness",
    "cramps", "bloating", "itching", "stiffness", "palpitations", "wheeze", "numbness",
    "chills", "vomiting", "headache", "sweats", "tremor", "weakness", "burning",
    "tingling", "soreness", "pressure",
]


def make_synth_kb(n_docs: int, seed: int = 0) -> KnowledgeBase:
    rng = np.random.default_rng(seed)
    kb = KnowledgeBase()
    for i in range(n_docs):
        site = SITES[i % len(SITES)]
        root = ROOTS[(i // len(SITES)) % len(ROOTS)]
        suffix = SUFFIXES[(i // (len(SITES) * len(ROOTS))) % len(SUFFIXES)]
        name = f"{site} {root}{suffix}"
        alias = f"{root}ic {site} disorder"
        picks = list(rng.choice(SYMPTOMS, size=6, replace=False))
        description = f"condition of the {site} marked by " + ", ".join(picks[:4])
        knowledge = (
            f"typical findings include {picks[0]}, {picks[1]} and {picks[4]}; "
            f"consider when {picks[5]} persists near the {site}"
        )
        kb.add(
            DiseaseDoc(
                id=f"s{i:03d}",
                name=name,
                aliases=(alias,),
                description=description,
                diagnosis_knowledge=knowledge,
            )
        )
    return kb


def make_synth_queries(
    kb: KnowledgeBase, n_queries: int, seed: int, dropout: float = 0.3
) -> list[tuple[str, list[str]]]:
    """Queries derived from document text by token dropout and alias
    substitution; gold is the source document."""
    rng = np.random.default_rng(seed)
    ids = kb.ids()
    queries = []
    for _ in range(n_queries):
        doc_id = ids[int(rng.integers(len(ids)))]
        doc = kb.require(doc_id)
        surface = doc.aliases[0] if (doc.aliases and rng.random() < 0.5) else doc.name
        tokens = word_tokens(f"{surface} {doc.description}")
        kept = [t for t in tokens if rng.random() >= dropout]
        if not kept:
            kept = tokens[:2]
        queries.append((" ".join(kept), [doc_id]))
    return queries


def make_preference_turns(
    kb: KnowledgeBase,
    n_turns: int,
    seed: int,
    refined_size: int = 12,
    post_size: int = 3,
) -> list[dict]:
    """Turns where the post-hoc annotated diseases are a subset of the
    refined pool signalled by the history text, while the pool order
    (standing in for retrieval order) carries no signal."""
    rng = np.random.default_rng(seed)
    ids = kb.ids()
    turns = []
    for _ in range(n_turns):
        pool = [ids[i] for i in rng.choice(len(ids), size=refined_size, replace=False)]
        post = [pool[i] for i in rng.choice(refined_size, size=post_size, replace=False)]
        mentioned = " and ".join(kb.require(d).name for d in post)
        history = (
            "Patient: I have been feeling unwell for days.\n"
            "Doctor: Tell me more about where it bothers you.\n"
            f"Patient: The trouble seems to involve {mentioned}."
        )
        turns.append({"history": history, "pool": pool, "post": post})
    return turns


# -- gradient checking -----------------------------------------------------

def finite_diff_column_grads(loss_fn, model, columns, eps: float = 1e-4):
    """Central finite differences of ``loss_fn()`` w.r.t. encoder columns."""
    grads = {}
    for j in columns:
        base = model.column(j)
        grad = np.zeros_like(base)
        for idx in range(len(base)):
            plus = base.copy()
            plus[idx] += eps
            model.set_column(j, plus)
            up = loss_fn()
            minus = base.copy()
            minus[idx] -= eps
            model.set_column(j, minus)
            down = loss_fn()
            grad[idx] = (up - down) / (2 * eps)
        model.set_column(j, base)
        grads[j] = grad
    return grads


def finite_diff_vector(loss_fn, get_vec, set_vec, eps: float = 1e-4):
    base = np.array(get_vec(), dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    for idx in range(base.size):
        plus = base.copy()
        plus.flat[idx] += eps
        set_vec(plus)
        up = loss_fn()
        minus = base.copy()
        minus.flat[idx] -= eps
        set_vec(minus)
        down = loss_fn()
        grad.flat[idx] = (up - down) / (2 * eps)
    set_vec(base)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom
