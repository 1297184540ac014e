/** Wire types mirroring the engine's TurnTrace / Session JSON. */

export interface FindingView {
  text: string;
  soap: string;
}

export interface VotesView {
  votes: Record<string, number>;
  groups: number;
  threshold: number;
}

export interface RelationView {
  finding: string;
  soap: string;
  disease: string;
  status: string;
  rationale: string;
  turn: number;
}

export interface RankedView {
  id: string;
  name: string;
  score: number;
}

export interface TurnTrace {
  turn: number;
  patient: string;
  findings?: FindingView[];
  votes?: VotesView;
  refined?: string[];
  memory_delta?: RelationView[];
  ranked?: RankedView[];
  thought_steps?: string[];
  response?: string;
  timings?: Record<string, number>;
}

export interface UtteranceView {
  role: "patient" | "doctor";
  text: string;
}

export interface SessionView {
  id: string;
  history: UtteranceView[];
  traces: TurnTrace[];
  errors: unknown[];
}

/** Client-side render state; everything displayed comes from the trace. */
export interface TraceViewState {
  expandedStages: Set<string>;
  selectedDisease: string | null;
}
