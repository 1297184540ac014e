/** Thin typed client for the engine's HTTP/JSON API. */

import type { SessionView, TurnTrace } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: string,
  ) {
    super(`HTTP ${status}: ${body}`);
  }
}

export class ApiClient {
  constructor(public baseUrl: string) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "Content-Type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const response = await fetch(`${this.baseUrl}${path}`, init);
    const text = await response.text();
    if (!response.ok) {
      throw new ApiError(response.status, text);
    }
    return JSON.parse(text) as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/healthz");
  }

  createSession(): Promise<{ id: string }> {
    return this.request("POST", "/sessions");
  }

  sendMessage(sessionId: string, text: string): Promise<TurnTrace> {
    return this.request("POST", `/sessions/${sessionId}/message`, { text });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  getTrace(sessionId: string, turn: number): Promise<TurnTrace> {
    return this.request("GET", `/sessions/${sessionId}/trace/${turn}`);
  }
}
