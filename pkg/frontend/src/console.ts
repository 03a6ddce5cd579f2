// Console state machine. Holds the current episode, the operator's selections
// and the server's feedback; every state change awaits the server response.

import type { FailureView, RecoveryApi, Score, ScoreFeedback } from "./api.js";

export type Phase = "setup" | "loading" | "viewing" | "feedback" | "summary" | "error";

export interface Selection {
  causeId: string | null;
  recoveryId: string | null;
}

export interface ConsoleState {
  phase: Phase;
  condition: string | null;
  env: string | null;
  sessionId: string | null;
  totalEpisodes: number;
  episodeIndex: number;
  keyframeIndex: number;
  view: FailureView | null;
  selection: Selection;
  feedback: ScoreFeedback | null;
  score: Score | null;
  summary: Score | null;
  error: string | null;
}

export function initialState(): ConsoleState {
  return {
    phase: "setup",
    condition: null,
    env: null,
    sessionId: null,
    totalEpisodes: 0,
    episodeIndex: 0,
    keyframeIndex: 0,
    view: null,
    selection: { causeId: null, recoveryId: null },
    feedback: null,
    score: null,
    summary: null,
    error: null,
  };
}

type Listener = (state: ConsoleState) => void;

export class ConsoleApp {
  state: ConsoleState = initialState();
  private listeners: Listener[] = [];
  private inFlight = false;

  constructor(private readonly api: RecoveryApi) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  private patch(changes: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...changes };
    this.emit();
  }

  async start(condition: string, env: string, seed: number): Promise<void> {
    this.patch({ ...initialState(), phase: "loading", condition, env });
    try {
      const info = await this.api.createSession(condition, env, seed);
      this.patch({ sessionId: info.session_id, totalEpisodes: info.episodes });
      await this.loadEpisode(0);
    } catch (err) {
      this.fail(err);
    }
  }

  async loadEpisode(index: number): Promise<void> {
    if (this.state.sessionId === null) return;
    this.patch({
      phase: "loading",
      episodeIndex: index,
      view: null,
      feedback: null,
      selection: { causeId: null, recoveryId: null },
      keyframeIndex: 0,
      error: null,
    });
    try {
      const view = await this.api.getFailureView(this.state.sessionId, index);
      this.patch({
        phase: "viewing",
        view,
        keyframeIndex: Math.max(view.keyframes.length - 1, 0),
      });
    } catch (err) {
      this.fail(err);
    }
  }

  select(kind: "cause" | "recovery", id: string): void {
    if (this.state.phase !== "viewing") return;
    const selection = { ...this.state.selection };
    if (kind === "cause") selection.causeId = id;
    else selection.recoveryId = id;
    this.patch({ selection });
  }

  selectKeyframe(index: number): void {
    if (!this.state.view) return;
    if (index < 0 || index >= this.state.view.keyframes.length) return;
    this.patch({ keyframeIndex: index });
  }

  get canSubmit(): boolean {
    return (
      this.state.phase === "viewing" &&
      !this.inFlight &&
      this.state.selection.causeId !== null &&
      this.state.selection.recoveryId !== null
    );
  }

  async submit(): Promise<void> {
    // the double-submit guard: ignored unless a full selection is pending
    if (!this.canSubmit || this.state.sessionId === null) return;
    const { causeId, recoveryId } = this.state.selection;
    this.inFlight = true;
    try {
      const feedback = await this.api.submitRecovery(
        this.state.sessionId,
        this.state.episodeIndex,
        causeId as string,
        recoveryId as string,
      );
      this.patch({ phase: "feedback", feedback, score: feedback.score });
    } catch (err) {
      this.fail(err);
    } finally {
      this.inFlight = false;
    }
  }

  async acknowledge(): Promise<void> {
    if (this.state.phase !== "feedback" || this.state.sessionId === null) return;
    const next = this.state.episodeIndex + 1;
    if (next >= this.state.totalEpisodes) {
      try {
        const summary = await this.api.getScore(this.state.sessionId);
        this.patch({ phase: "summary", summary });
      } catch (err) {
        this.fail(err);
      }
      return;
    }
    await this.loadEpisode(next);
  }

  async retry(): Promise<void> {
    if (this.state.sessionId === null) {
      this.patch(initialState());
      return;
    }
    await this.loadEpisode(this.state.episodeIndex);
  }

  private fail(err: unknown): void {
    const message = err instanceof Error ? err.message : String(err);
    this.patch({ phase: "error", error: message });
  }
}
