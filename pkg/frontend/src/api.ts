// Typed client for the observer-study HTTP API. The fetch function is
// injectable so tests can stand in a scripted server.

export type Side = "left" | "right";

export interface PairInfo {
  pair_index: number;
  left_image_url: string;
  right_image_url: string;
  progress: { answered: number; total: number };
}

export interface DoneMarker {
  done: true;
  answered: number;
}

export interface Ack {
  recorded: boolean;
  pair_index: number;
  remaining: number;
}

export interface SummaryRow {
  observer_id: string;
  answered: number;
  accuracy_pct: number;
  accuracy_display: number;
  median_confidence: number;
}

export interface ApiError {
  code: string;
  message: string;
}

export class ServiceError extends Error {
  code: string;
  status: number;

  constructor(status: number, body: ApiError) {
    super(body.message);
    this.code = body.code;
    this.status = status;
  }
}

export type FetchFn = (input: string, init?: RequestInit) => Promise<Response>;

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let body: ApiError;
    try {
      body = (await resp.json()) as ApiError;
    } catch {
      body = { code: "http_error", message: `HTTP ${resp.status}` };
    }
    throw new ServiceError(resp.status, body);
  }
  return (await resp.json()) as T;
}

export class StudyClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchFn = (input, init) => fetch(input, init),
  ) {}

  async createSession(observerId: string, seed: number, manifestPath: string):
      Promise<{ session_id: string; pair_count: number }> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ observer_id: observerId, seed, manifest_path: manifestPath }),
    });
    return asJson(resp);
  }

  async nextPair(sessionId: string): Promise<PairInfo | DoneMarker> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${sessionId}/next`);
    return asJson(resp);
  }

  async submitResponse(sessionId: string, pairIndex: number, side: Side,
                       confidence: number, elapsedMs: number): Promise<Ack> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${sessionId}/responses`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        pair_index: pairIndex,
        chosen_side: side,
        confidence,
        elapsed_ms: elapsedMs,
      }),
    });
    return asJson(resp);
  }

  async sessionSummary(sessionId: string): Promise<SummaryRow> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${sessionId}/summary`);
    return asJson(resp);
  }
}

export function isDone(x: PairInfo | DoneMarker): x is DoneMarker {
  return (x as DoneMarker).done === true;
}
