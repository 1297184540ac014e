/** DOM rendering of the per-turn reasoning trace.
 *
 * Every number shown is taken verbatim from the trace JSON; nothing is
 * recomputed client-side. Only stages actually present in the payload get a
 * panel.
 */

import type { RelationView, TraceViewState, TurnTrace } from "./types.js";

export const STAGE_ORDER: ReadonlyArray<[keyof TurnTrace & string, string]> = [
  ["findings", "Findings"],
  ["votes", "Votes"],
  ["refined", "Refined diseases"],
  ["memory_delta", "Relation analysis"],
  ["ranked", "Priority ranking"],
  ["thought_steps", "Thought process"],
  ["response", "Response"],
];

export const STAGE_KEYS = STAGE_ORDER.map(([key]) => key);

const RELATION_STATUS_ORDER = ["support", "oppose", "irrelevant"];

export type DiseaseSelectHandler = (diseaseId: string | null) => void;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function panel(stage: string, title: string, state: TraceViewState): HTMLElement {
  const section = el("section", "panel");
  section.dataset.stage = stage;
  const header = el("h3");
  const toggle = el("button", "panel-toggle", title);
  toggle.type = "button";
  header.appendChild(toggle);
  section.appendChild(header);
  if (!state.expandedStages.has(stage)) {
    section.classList.add("collapsed");
  }
  toggle.addEventListener("click", () => {
    if (state.expandedStages.has(stage)) {
      state.expandedStages.delete(stage);
    } else {
      state.expandedStages.add(stage);
    }
    section.classList.toggle("collapsed");
  });
  return section;
}

function renderFindings(trace: TurnTrace, state: TraceViewState): HTMLElement {
  const section = panel("findings", "Findings", state);
  const list = el("ul", "findings-list");
  for (const finding of trace.findings ?? []) {
    const item = el("li", "finding");
    item.dataset.soap = finding.soap;
    item.textContent = `[${finding.soap}] ${finding.text}`;
    list.appendChild(item);
  }
  section.appendChild(list);
  return section;
}

function renderVotes(
  trace: TurnTrace,
  state: TraceViewState,
  onSelect: DiseaseSelectHandler,
): HTMLElement {
  const section = panel("votes", "Votes", state);
  const votes = trace.votes!;
  const caption = el(
    "p",
    "votes-caption",
    `majority threshold ${String(votes.threshold)} of ${String(votes.groups)} groups`,
  );
  section.appendChild(caption);

  const chart = el("div", "vote-chart");
  const marker = el("div", "threshold-marker");
  marker.dataset.threshold = String(votes.threshold);
  marker.dataset.groups = String(votes.groups);
  marker.style.left = `${(votes.threshold / votes.groups) * 100}%`;
  chart.appendChild(marker);

  for (const diseaseId of Object.keys(votes.votes).sort()) {
    const count = votes.votes[diseaseId]!;
    const row = el("div", "vote-row");
    row.dataset.disease = diseaseId;
    if (state.selectedDisease === diseaseId) row.classList.add("highlight");
    const label = el("span", "vote-label", diseaseId);
    const track = el("div", "vote-track");
    const bar = el("div", "vote-bar");
    bar.style.width = `${(count / votes.groups) * 100}%`;
    track.appendChild(bar);
    const value = el("span", "vote-count", String(count));
    row.append(label, track, value);
    row.addEventListener("click", () => onSelect(diseaseId));
    chart.appendChild(row);
  }
  section.appendChild(chart);
  return section;
}

function renderRefined(trace: TurnTrace, state: TraceViewState): HTMLElement {
  const section = panel("refined", "Refined diseases", state);
  const refined = trace.refined ?? [];
  if (refined.length === 0) {
    section.appendChild(el("p", "empty-note", "none survived the vote"));
    return section;
  }
  const list = el("ul", "refined-list");
  for (const diseaseId of refined) {
    const item = el("li", "refined-disease", diseaseId);
    item.dataset.disease = diseaseId;
    list.appendChild(item);
  }
  section.appendChild(list);
  return section;
}

function relationItem(
  entry: RelationView,
  state: TraceViewState,
  onSelect: DiseaseSelectHandler,
): HTMLElement {
  const item = el("li", "relation-entry");
  item.dataset.disease = entry.disease;
  item.dataset.status = entry.status;
  if (state.selectedDisease === entry.disease) item.classList.add("highlight");
  item.textContent = `${entry.finding} | ${entry.disease}: ${entry.rationale}`;
  item.addEventListener("click", () => onSelect(entry.disease));
  return item;
}

function renderRelations(
  trace: TurnTrace,
  state: TraceViewState,
  onSelect: DiseaseSelectHandler,
): HTMLElement {
  const section = panel("memory_delta", "Relation analysis", state);
  const entries = trace.memory_delta ?? [];
  if (entries.length === 0) {
    section.appendChild(el("p", "empty-note", "none recorded"));
    return section;
  }
  const statuses = RELATION_STATUS_ORDER.filter((s) => entries.some((e) => e.status === s));
  for (const status of statuses) {
    const group = entries.filter((e) => e.status === status);
    const heading = el("h4", "relation-status", `${status} (${String(group.length)})`);
    const list = el("ul", "relation-list");
    list.dataset.status = status;
    for (const entry of group) {
      list.appendChild(relationItem(entry, state, onSelect));
    }
    section.append(heading, list);
  }
  return section;
}

function renderRanked(
  trace: TurnTrace,
  state: TraceViewState,
  onSelect: DiseaseSelectHandler,
): HTMLElement {
  const section = panel("ranked", "Priority ranking", state);
  const ranked = trace.ranked ?? [];
  if (ranked.length === 0) {
    section.appendChild(el("p", "empty-note", "no ranked diseases"));
    return section;
  }
  const list = el("ol", "ranked-list");
  for (const row of ranked) {
    const item = el("li", "ranked-disease");
    item.dataset.disease = row.id;
    if (state.selectedDisease === row.id) item.classList.add("highlight");
    const name = el("span", "ranked-name", row.name);
    const score = el("span", "ranked-score", String(row.score));
    item.append(name, score);
    item.addEventListener("click", () => onSelect(row.id));
    list.appendChild(item);
  }
  section.appendChild(list);
  return section;
}

function renderSteps(trace: TurnTrace, state: TraceViewState): HTMLElement {
  const section = panel("thought_steps", "Thought process", state);
  const list = el("ol", "thought-steps");
  for (const step of trace.thought_steps ?? []) {
    list.appendChild(el("li", "thought-step", step));
  }
  section.appendChild(list);
  return section;
}

function renderResponse(trace: TurnTrace, state: TraceViewState): HTMLElement {
  const section = panel("response", "Response", state);
  section.appendChild(el("blockquote", "response-text", trace.response ?? ""));
  return section;
}

/** Render the stage panels for one trace into `root` (replacing content). */
export function renderTrace(
  root: HTMLElement,
  trace: TurnTrace,
  state: TraceViewState,
  onSelect: DiseaseSelectHandler,
): void {
  root.replaceChildren();
  const title = el("p", "trace-title", `Turn ${String(trace.turn)}`);
  root.appendChild(title);
  const builders: Record<string, () => HTMLElement> = {
    findings: () => renderFindings(trace, state),
    votes: () => renderVotes(trace, state, onSelect),
    refined: () => renderRefined(trace, state),
    memory_delta: () => renderRelations(trace, state, onSelect),
    ranked: () => renderRanked(trace, state, onSelect),
    thought_steps: () => renderSteps(trace, state),
    response: () => renderResponse(trace, state),
  };
  for (const [stage] of STAGE_ORDER) {
    if (trace[stage] === undefined) continue; // never fabricate absent stages
    root.appendChild(builders[stage]!());
  }
}

export function renderNotFound(root: HTMLElement, turn: number): void {
  root.replaceChildren();
  root.appendChild(el("p", "not-found", `No trace recorded for turn ${String(turn)}`));
}
