/** Console wiring: session lifecycle, chat pane, and trace inspection.
 *
 * Read/steer only: the sole mutating calls are POST /sessions and
 * POST /sessions/{id}/message. One turn in flight per session, enforced
 * client-side (the service enforces it authoritatively).
 */

import { ApiClient } from "./api.js";
import { renderNotFound, renderTrace, STAGE_KEYS } from "./render.js";
import type { TraceViewState, TurnTrace } from "./types.js";

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

export class ConsoleApp {
  readonly api: ApiClient;
  sessionId: string | null = null;
  traces: TurnTrace[] = [];
  state: TraceViewState = { expandedStages: new Set(STAGE_KEYS), selectedDisease: null };
  selectedTurn: number | null = null; // null tracks the latest turn
  private starting = false;
  private inFlight = false;

  private banner!: HTMLElement;
  private sessionLabel!: HTMLElement;
  private chatLog!: HTMLElement;
  private input!: HTMLInputElement;
  private sendButton!: HTMLButtonElement;
  private startButton!: HTMLButtonElement;
  private turnSelect!: HTMLSelectElement;
  private tracePane!: HTMLElement;

  constructor(
    readonly root: HTMLElement,
    api: ApiClient,
  ) {
    this.api = api;
    this.build();
  }

  private build(): void {
    this.root.replaceChildren();

    const header = el("header", "console-header");
    this.startButton = el("button", "start-button", "Start session");
    this.startButton.id = "start-btn";
    this.sessionLabel = el("span", "session-label", "no session");
    this.sessionLabel.id = "session-label";
    this.banner = el("div", "banner hidden");
    this.banner.id = "banner";
    header.append(this.startButton, this.sessionLabel);
    this.root.append(header, this.banner);

    const main = el("main", "console-main");

    const chat = el("section", "chat-pane");
    this.chatLog = el("div", "chat-log");
    this.chatLog.id = "chat-log";
    const form = el("div", "chat-input");
    this.input = el("input") as HTMLInputElement;
    this.input.id = "message-input";
    this.input.placeholder = "Patient utterance...";
    this.input.disabled = true;
    this.sendButton = el("button", "send-button", "Send");
    this.sendButton.id = "send-btn";
    this.sendButton.disabled = true;
    form.append(this.input, this.sendButton);
    chat.append(this.chatLog, form);

    const traceSide = el("section", "trace-side");
    const controls = el("div", "trace-controls");
    this.turnSelect = el("select") as HTMLSelectElement;
    this.turnSelect.id = "turn-select";
    controls.appendChild(this.turnSelect);
    this.tracePane = el("div", "trace-pane");
    this.tracePane.id = "trace-pane";
    traceSide.append(controls, this.tracePane);

    main.append(chat, traceSide);
    this.root.appendChild(main);

    this.startButton.addEventListener("click", () => void this.startSession());
    this.sendButton.addEventListener("click", () => void this.submit());
    this.input.addEventListener("keydown", (event) => {
      if (event.key === "Enter") void this.submit();
    });
    this.input.addEventListener("input", () => this.syncSendEnabled());
    this.turnSelect.addEventListener("change", () => {
      this.inspect(Number(this.turnSelect.value));
    });
  }

  private showBanner(text: string, onRetry: () => void): void {
    this.banner.replaceChildren();
    this.banner.classList.remove("hidden");
    this.banner.appendChild(el("span", "banner-text", text));
    const retry = el("button", "retry-button", "Retry");
    retry.addEventListener("click", () => {
      this.banner.classList.add("hidden");
      onRetry();
    });
    this.banner.appendChild(retry);
  }

  private syncSendEnabled(): void {
    this.sendButton.disabled =
      this.sessionId === null || this.inFlight || this.input.value.trim() === "";
  }

  async startSession(): Promise<void> {
    if (this.starting || this.sessionId !== null) return; // debounced
    this.starting = true;
    this.startButton.disabled = true;
    try {
      const { id } = await this.api.createSession();
      this.sessionId = id;
      this.sessionLabel.textContent = `session ${id}`;
      this.input.disabled = false;
      this.syncSendEnabled();
    } catch (error) {
      this.startButton.disabled = false;
      this.showBanner(`could not start a session: ${String(error)}`, () => {
        void this.startSession();
      });
    } finally {
      this.starting = false;
    }
  }

  private bubble(role: "patient" | "doctor", text: string): void {
    const node = el("div", `bubble ${role}`, text);
    this.chatLog.appendChild(node);
  }

  private async submit(): Promise<void> {
    const text = this.input.value.trim();
    if (!text) return;
    await this.sendMessage(text);
  }

  async sendMessage(text: string): Promise<void> {
    if (this.sessionId === null || this.inFlight) return;
    this.inFlight = true;
    this.input.disabled = true;
    this.sendButton.disabled = true;
    this.bubble("patient", text);
    try {
      const trace = await this.api.sendMessage(this.sessionId, text);
      this.traces.push(trace);
      this.bubble("doctor", trace.response ?? "");
      this.refreshTurnOptions();
      this.input.value = "";
      this.selectedTurn = null;
      this.renderSelectedTrace();
    } catch (error) {
      const errorRow = el("div", "send-error");
      errorRow.appendChild(el("span", "send-error-text", `turn failed: ${String(error)}`));
      const retry = el("button", "retry-button", "Retry");
      retry.addEventListener("click", () => {
        errorRow.remove();
        void this.sendMessage(text); // re-send the same text, user-confirmed
      });
      errorRow.appendChild(retry);
      this.chatLog.appendChild(errorRow);
    } finally {
      this.inFlight = false;
      this.input.disabled = false;
      this.syncSendEnabled();
    }
  }

  private refreshTurnOptions(): void {
    this.turnSelect.replaceChildren();
    for (const trace of this.traces) {
      const option = el("option", undefined, `turn ${String(trace.turn)}`) as HTMLOptionElement;
      option.value = String(trace.turn);
      this.turnSelect.appendChild(option);
    }
    if (this.traces.length > 0) {
      this.turnSelect.value = String(this.traces[this.traces.length - 1]!.turn);
    }
  }

  private renderSelectedTrace(): void {
    const turn = this.selectedTurn ?? this.traces[this.traces.length - 1]?.turn;
    if (turn === undefined) return;
    this.inspect(turn);
  }

  inspect(turn: number): void {
    const trace = this.traces.find((t) => t.turn === turn);
    if (trace === undefined) {
      renderNotFound(this.tracePane, turn);
      return;
    }
    this.selectedTurn = turn;
    if (this.turnSelect.value !== String(turn)) this.turnSelect.value = String(turn);
    renderTrace(this.tracePane, trace, this.state, (diseaseId) => {
      this.state.selectedDisease = this.state.selectedDisease === diseaseId ? null : diseaseId;
      this.inspect(turn);
    });
  }
}

export function createConsole(root: HTMLElement, baseUrl: string): ConsoleApp {
  return new ConsoleApp(root, new ApiClient(baseUrl));
}
