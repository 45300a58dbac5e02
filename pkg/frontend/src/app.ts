// DOM application for one observer session: side-by-side pair display,
// forced choice, confidence entry, progress, and the completion screen.
// The completion screen renders the service's own summary so what the
// observer sees is exactly what the summary endpoint reports.

import { isDone, ServiceError, StudyClient } from "./api.js";
import type { PairInfo, Side, SummaryRow } from "./api.js";
import {
  beginPair,
  canSubmit,
  CONFIDENCE_LABELS,
  freshState,
  progressLabel,
  selectConfidence,
  selectSide,
  UiSessionState,
} from "./state.js";

export interface AppOptions {
  now?: () => number;
}

export class StudyApp {
  readonly state: UiSessionState;
  private readonly now: () => number;
  private keyHandler: (ev: KeyboardEvent) => void;

  constructor(
    private root: HTMLElement,
    private client: StudyClient,
    sessionId: string,
    pairCount: number,
    opts: AppOptions = {},
  ) {
    this.state = freshState(sessionId, pairCount);
    this.now = opts.now ?? (() => Date.now());
    this.keyHandler = (ev) => this.onKey(ev);
    this.root.ownerDocument.addEventListener("keydown", this.keyHandler);
  }

  dispose(): void {
    this.root.ownerDocument.removeEventListener("keydown", this.keyHandler);
  }

  async start(): Promise<void> {
    await this.loadNext();
  }

  async loadNext(): Promise<void> {
    const nxt = await this.client.nextPair(this.state.sessionId);
    if (isDone(nxt)) {
      this.state.done = true;
      this.state.current = null;
      const summary = await this.client.sessionSummary(this.state.sessionId);
      this.renderCompletion(summary);
      return;
    }
    beginPair(this.state, nxt, this.now());
    this.renderPair(nxt);
  }

  private onKey(ev: KeyboardEvent): void {
    if (this.state.done || this.state.current === null) {
      return;
    }
    if (ev.key === "ArrowLeft") {
      this.choose("left");
    } else if (ev.key === "ArrowRight") {
      this.choose("right");
    } else if (ev.key >= "1" && ev.key <= "5") {
      this.setConfidence(Number(ev.key));
    } else if (ev.key === "Enter") {
      void this.submit();
    }
  }

  choose(side: Side): void {
    selectSide(this.state, side);
    this.refreshControls();
  }

  setConfidence(level: number): void {
    selectConfidence(this.state, level);
    this.refreshControls();
  }

  async submit(): Promise<void> {
    if (!canSubmit(this.state)) {
      return;
    }
    const pair = this.state.current!;
    const side = this.state.selectedSide!;
    const confidence = this.state.selectedConfidence!;
    this.state.submitting = true;
    this.refreshControls();
    try {
      await this.client.submitResponse(
        this.state.sessionId, pair.pair_index, side, confidence,
        this.now() - this.state.startedMs);
      this.state.submittedPairs.add(pair.pair_index);
      await this.loadNext();
    } catch (err) {
      this.state.submitting = false;
      if (err instanceof ServiceError) {
        // conflicts and sequence errors are surfaced verbatim; a duplicate
        // means the service already holds this response, so the only safe
        // continuation is to move on, never to resubmit
        this.showError(`${err.code}: ${err.message}`,
                       err.code === "duplicate_response" ? "continue" : "none");
        if (err.code === "duplicate_response") {
          this.state.submittedPairs.add(pair.pair_index);
        }
      } else {
        // network failure: the selection stays in place for a manual retry
        this.showError("network failure — your response was kept locally", "retry");
        this.state.pendingRetry = true;
      }
      this.refreshControls();
    }
  }

  // rendering -------------------------------------------------------------

  private el<K extends keyof HTMLElementTagNameMap>(
      tag: K, className?: string, text?: string): HTMLElementTagNameMap[K] {
    const node = this.root.ownerDocument.createElement(tag);
    if (className) {
      node.className = className;
    }
    if (text !== undefined) {
      node.textContent = text;
    }
    return node;
  }

  renderPair(pair: PairInfo): void {
    this.root.textContent = "";
    const header = this.el("div", "header");
    header.appendChild(this.el("span", "progress", progressLabel(this.state)));
    header.appendChild(this.el("span", "prompt",
      "Pick the synthetic image, then rate your confidence."));
    this.root.appendChild(header);

    const panels = this.el("div", "panels");
    for (const side of ["left", "right"] as const) {
      const panel = this.el("div", `panel panel-${side}`);
      panel.dataset.side = side;
      const img = this.el("img", "pair-image");
      img.src = side === "left" ? pair.left_image_url : pair.right_image_url;
      img.alt = `${side} image`;
      img.draggable = false;
      img.addEventListener("error", () => {
        panel.textContent = "";
        const prompt = this.el("div", "image-error", "image failed to load");
        const retry = this.el("button", "retry-image", "Retry");
        retry.addEventListener("click", () => {
          panel.textContent = "";
          panel.appendChild(img);
          img.src = `${img.src.split("#")[0]}#${this.now()}`;
        });
        panel.appendChild(prompt);
        panel.appendChild(retry);
      });
      panel.appendChild(img);
      panel.addEventListener("click", () => this.choose(side));
      panels.appendChild(panel);
    }
    this.root.appendChild(panels);

    const confidenceRow = this.el("div", "confidence-row");
    CONFIDENCE_LABELS.forEach((label, i) => {
      const btn = this.el("button", "confidence", label);
      btn.dataset.level = String(i + 1);
      btn.addEventListener("click", () => this.setConfidence(i + 1));
      confidenceRow.appendChild(btn);
    });
    this.root.appendChild(confidenceRow);

    const submit = this.el("button", "submit", "Submit");
    submit.addEventListener("click", () => void this.submit());
    this.root.appendChild(submit);

    this.root.appendChild(this.el("div", "error-banner"));
    this.refreshControls();
  }

  refreshControls(): void {
    const panels = this.root.querySelectorAll<HTMLElement>(".panel");
    panels.forEach((panel) => {
      panel.classList.toggle("selected", panel.dataset.side === this.state.selectedSide);
    });
    this.root.querySelectorAll<HTMLButtonElement>("button.confidence").forEach((btn) => {
      btn.classList.toggle("selected",
        Number(btn.dataset.level) === this.state.selectedConfidence);
    });
    const submit = this.root.querySelector<HTMLButtonElement>("button.submit");
    if (submit) {
      submit.disabled = !canSubmit(this.state) && !this.state.pendingRetry;
      submit.textContent = this.state.pendingRetry ? "Retry submit" : "Submit";
    }
  }

  showError(message: string, action: "none" | "retry" | "continue"): void {
    const banner = this.root.querySelector<HTMLElement>(".error-banner");
    if (!banner) {
      return;
    }
    banner.textContent = "";
    banner.appendChild(this.el("span", "error-text", message));
    if (action === "continue") {
      const btn = this.el("button", "continue", "Load next pair");
      btn.addEventListener("click", () => void this.loadNext());
      banner.appendChild(btn);
    }
  }

  renderCompletion(summary: SummaryRow): void {
    this.root.textContent = "";
    const box = this.el("div", "completion");
    box.appendChild(this.el("h2", "", "Session complete"));
    const table = this.el("table", "summary-table");
    const head = this.el("tr");
    for (const col of ["Observer", "Accuracy", "Median confidence level"]) {
      head.appendChild(this.el("th", "", col));
    }
    table.appendChild(head);
    const row = this.el("tr", "summary-row");
    row.appendChild(this.el("td", "observer", summary.observer_id));
    const accuracy = this.el("td", "accuracy", `${summary.accuracy_display}%`);
    accuracy.dataset.raw = String(summary.accuracy_pct);
    row.appendChild(accuracy);
    row.appendChild(this.el("td", "median-confidence",
      String(summary.median_confidence)));
    table.appendChild(row);
    box.appendChild(table);
    box.appendChild(this.el("p", "answered", `${summary.answered} pairs answered`));
    this.root.appendChild(box);
  }
}
