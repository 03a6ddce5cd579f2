// Pure rendering: state in, HTML string out. No correctness logic lives here;
// verdict badges mirror the server feedback verbatim.

import type { FailureView, Keyframe, Score } from "./api.js";
import type { ConsoleState } from "./console.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const STATUS_CLASS: Record<string, string> = {
  "-1": "errored",
  "0": "active",
  "1": "completed",
  null: "undefined",
};

function statusClass(status: number | null): string {
  return STATUS_CLASS[String(status)] ?? "undefined";
}

function renderStatusPanel(view: FailureView, frame: Keyframe): string {
  const items = view.actions
    .map((action, i) => {
      const status = frame.action_status[i] ?? null;
      return `<li class="status ${statusClass(status)}" data-action-name="${escapeHtml(action)}">` +
        `${escapeHtml(action)}</li>`;
    })
    .join("");
  return `<ul class="status-panel">${items}</ul>`;
}

function renderScene(frame: Keyframe): string {
  // top-down schematic: x right, y up, fixed world window
  const scale = 60;
  const toX = (x: number) => 40 + x * scale;
  const toY = (y: number) => 320 - (y + 2.5) * scale;
  const entities = Object.entries(frame.entity_locations)
    .map(([name, pos]) => {
      const [x = 0, y = 0] = pos;
      return (
        `<circle cx="${toX(x).toFixed(1)}" cy="${toY(y).toFixed(1)}" r="8" class="entity"></circle>` +
        `<text x="${(toX(x) + 10).toFixed(1)}" y="${toY(y).toFixed(1)}" class="entity-label">` +
        `${escapeHtml(name)}</text>`
      );
    })
    .join("");
  const [rx = 0, ry = 0] = frame.position;
  return (
    `<svg viewBox="0 0 520 480" class="scene" role="img">` +
    `<rect x="0" y="0" width="520" height="480" class="floor"></rect>` +
    entities +
    `<circle cx="${toX(rx).toFixed(1)}" cy="${toY(ry).toFixed(1)}" r="12" class="robot"></circle>` +
    `</svg>`
  );
}

function renderScrubber(state: ConsoleState, view: FailureView): string {
  const ticks = view.keyframes
    .map((frame, i) => {
      const selected = i === state.keyframeIndex ? " selected" : "";
      return `<button class="tick${selected}" data-action="keyframe" data-index="${i}">t=${frame.t}</button>`;
    })
    .join("");
  return `<div class="scrubber" data-role="scrubber">${ticks}</div>`;
}

export function renderExplanation(view: FailureView): string {
  if (view.explanation === "") {
    return `<p class="explanation empty" data-role="explanation-empty">no explanation available</p>`;
  }
  return `<blockquote class="explanation" data-role="explanation">${escapeHtml(view.explanation)}</blockquote>`;
}

function renderChoices(state: ConsoleState, view: FailureView): string {
  const group = (
    kind: "cause" | "recovery",
    title: string,
    options: { id: string; label: string }[],
    chosen: string | null,
  ) => {
    const buttons = options
      .map((option) => {
        const selected = option.id === chosen ? " selected" : "";
        return (
          `<li><button class="choice${selected}" data-action="choose-${kind}" ` +
          `data-id="${escapeHtml(option.id)}">${escapeHtml(option.label)}</button></li>`
        );
      })
      .join("");
    return `<section class="choices" data-role="${kind}-choices"><h3>${title}</h3><ul>${buttons}</ul></section>`;
  };
  return (
    group("cause", "What caused the failure?", view.cause_options, state.selection.causeId) +
    group("recovery", "How should it be fixed?", view.recovery_options, state.selection.recoveryId)
  );
}

function renderFeedback(state: ConsoleState): string {
  const feedback = state.feedback;
  if (!feedback) return "";
  const verdict = (label: string, good: boolean) =>
    `<span class="verdict ${good ? "correct" : "incorrect"}">${label}: ${good ? "correct" : "incorrect"}</span>`;
  const resumption = feedback.resumed
    ? `<div class="resumption animate-resume" data-role="resumed">plan resumed: ${escapeHtml(feedback.final_status)}` +
      renderScene(feedback.final_state) +
      `</div>`
    : `<div class="resumption persists" data-role="persists">failure persists</div>`;
  const score = state.score;
  const running = score
    ? `<p class="running-score" data-role="running-score">FId ${score.fid_correct}/${score.answered} ` +
      `(F1 ${score.fid_f1.toFixed(3)}) | SId ${score.sid_correct}/${score.answered} (F1 ${score.sid_f1.toFixed(3)})</p>`
    : "";
  return (
    `<section class="feedback" data-role="feedback">` +
    verdict("cause", feedback.cause_correct) +
    verdict("solution", feedback.recovery_correct) +
    resumption +
    running +
    `<button data-action="next">continue</button></section>`
  );
}

function renderSummary(summary: Score): string {
  return (
    `<section class="summary" data-role="summary">` +
    `<h2>session complete</h2>` +
    `<p>failure identification F1: <span data-role="fid-f1">${summary.fid_f1.toFixed(6)}</span></p>` +
    `<p>solution identification F1: <span data-role="sid-f1">${summary.sid_f1.toFixed(6)}</span></p>` +
    `<p>${summary.fid_correct}/${summary.total} causes, ${summary.sid_correct}/${summary.total} solutions</p>` +
    `</section>`
  );
}

export function renderApp(state: ConsoleState, canSubmit: boolean): string {
  if (state.phase === "setup") {
    return (
      `<section class="setup" data-role="setup">` +
      `<h2>start a recovery session</h2>` +
      `<select data-role="condition">` +
      ["None", "AB", "CB", "AB-H", "CB-H", "CB-H-M"]
        .map((c) => `<option value="${c}">${c}</option>`)
        .join("") +
      `</select>` +
      `<select data-role="env"><option value="kitchen">kitchen</option><option value="office">office</option></select>` +
      `<input data-role="seed" type="number" value="0">` +
      `<button data-action="start">start</button></section>`
    );
  }
  if (state.phase === "loading") {
    return `<p class="loading">loading…</p>`;
  }
  if (state.phase === "error") {
    return (
      `<div class="banner error" data-role="error-banner">${escapeHtml(state.error ?? "request failed")} ` +
      `<button data-action="retry">retry</button></div>`
    );
  }
  if (state.phase === "summary" && state.summary) {
    return renderSummary(state.summary);
  }
  const view = state.view;
  if (!view) return `<p class="loading">loading…</p>`;
  const frame = view.keyframes[state.keyframeIndex] ?? view.final_state;
  const header =
    `<header><h2>episode ${state.episodeIndex + 1} of ${state.totalEpisodes}</h2>` +
    `<p class="condition">condition: ${escapeHtml(state.condition ?? "")}</p></header>`;
  const submit =
    state.phase === "viewing"
      ? `<button data-action="submit" ${canSubmit ? "" : "disabled"}>submit</button>`
      : "";
  return (
    header +
    renderScrubber(state, view) +
    renderScene(frame) +
    renderStatusPanel(view, view.final_state) +
    renderExplanation(view) +
    renderChoices(state, view) +
    submit +
    renderFeedback(state)
  );
}
