// Session state machine, kept free of DOM and network concerns so it
// can be tested directly. A response is submittable only once both a
// side and a confidence level are selected, and each pair index can be
// submitted at most once (the idempotency guard behind double clicks).

import type { PairInfo, Side } from "./api.js";

export interface UiSessionState {
  sessionId: string;
  pairCount: number;
  current: PairInfo | null;
  selectedSide: Side | null;
  selectedConfidence: number | null; // 1..5
  submitting: boolean;
  submittedPairs: Set<number>;
  pendingRetry: boolean;
  done: boolean;
  startedMs: number;
}

export function freshState(sessionId: string, pairCount: number): UiSessionState {
  return {
    sessionId,
    pairCount,
    current: null,
    selectedSide: null,
    selectedConfidence: null,
    submitting: false,
    submittedPairs: new Set(),
    pendingRetry: false,
    done: false,
    startedMs: 0,
  };
}

export function beginPair(state: UiSessionState, pair: PairInfo, nowMs: number): void {
  state.current = pair;
  state.selectedSide = null;
  state.selectedConfidence = null;
  state.submitting = false;
  state.pendingRetry = false;
  state.startedMs = nowMs;
}

export function selectSide(state: UiSessionState, side: Side): void {
  if (state.current !== null && !state.submitting) {
    state.selectedSide = side;
  }
}

export function selectConfidence(state: UiSessionState, level: number): void {
  if (state.current !== null && !state.submitting && level >= 1 && level <= 5) {
    state.selectedConfidence = level;
  }
}

export function canSubmit(state: UiSessionState): boolean {
  return (
    state.current !== null &&
    state.selectedSide !== null &&
    state.selectedConfidence !== null &&
    !state.submitting &&
    !state.done &&
    !state.submittedPairs.has(state.current.pair_index)
  );
}

export function progressLabel(state: UiSessionState): string {
  if (state.current === null) {
    return "";
  }
  return `${state.current.pair_index + 1} of ${state.pairCount}`;
}

export const CONFIDENCE_LABELS: ReadonlyArray<string> = ["0%", "25%", "50%", "75%", "100%"];
