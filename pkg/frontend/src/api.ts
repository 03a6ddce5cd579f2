// Typed client for the recovery-service JSON API. The console never computes
// correctness itself; every verdict in these payloads comes from the server.

export interface Option {
  id: string;
  label: string;
}

export interface Keyframe {
  t: number;
  position: number[];
  entity_locations: Record<string, number[]>;
  action_status: (number | null)[];
}

export interface FinalState extends Keyframe {
  failed_action: string | null;
}

export interface SessionInfo {
  session_id: string;
  condition: string;
  env: string;
  episodes: number;
}

export interface FailureView {
  episode_id: string;
  index: number;
  actions: string[];
  explanation: string;
  cause_options: Option[];
  recovery_options: Option[];
  keyframes: Keyframe[];
  final_state: FinalState;
  answered: boolean;
}

export interface Score {
  answered: number;
  total: number;
  fid_correct: number;
  sid_correct: number;
  fid_f1: number;
  sid_f1: number;
}

export interface ScoreFeedback {
  cause_correct: boolean;
  recovery_correct: boolean;
  resumed: boolean;
  final_status: string;
  final_state: Keyframe;
  score: Score;
}

export interface RecoveryApi {
  createSession(condition: string, env: string, seed: number): Promise<SessionInfo>;
  getFailureView(sessionId: string, index: number): Promise<FailureView>;
  submitRecovery(
    sessionId: string,
    index: number,
    causeId: string,
    recoveryId: string,
  ): Promise<ScoreFeedback>;
  getScore(sessionId: string): Promise<Score>;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class HttpRecoveryApi implements RecoveryApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const body = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, body.code ?? "unknown", body.message ?? "request failed");
    }
    return body as T;
  }

  createSession(condition: string, env: string, seed: number): Promise<SessionInfo> {
    return this.request<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ condition, env, seed }),
    });
  }

  getFailureView(sessionId: string, index: number): Promise<FailureView> {
    return this.request<FailureView>(`/sessions/${sessionId}/episodes/${index}`);
  }

  submitRecovery(
    sessionId: string,
    index: number,
    causeId: string,
    recoveryId: string,
  ): Promise<ScoreFeedback> {
    return this.request<ScoreFeedback>(`/sessions/${sessionId}/episodes/${index}/recovery`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ cause_id: causeId, recovery_id: recoveryId }),
    });
  }

  getScore(sessionId: string): Promise<Score> {
    return this.request<Score>(`/sessions/${sessionId}/score`);
  }
}
