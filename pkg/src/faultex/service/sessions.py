"""Recovery-console sessions: episode queues, explanations, scoring, persistence."""

from __future__ import annotations

import json
import random
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .. import faults, features, seq2seq, templates
from ..faults import FaultSpec, Taxonomy, resolution_for
from ..features import Vocabulary
from ..simulator import EpisodeTrace, resume_with_recovery, run_episode
from ..templates import ExplanationType, FailureContext, PhraseBook
from ..worldmodel import (
    Environment,
    StateClass,
    classify_state,
    load_environments,
    make_task,
)

CONDITIONS = ("None", "AB", "CB", "AB-H", "CB-H", "CB-H-M")
EPISODES_PER_SESSION = 12  # two per failure cause


class DomainError(Exception):
    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


@dataclass
class ServiceDeps:
    envs: dict[str, Environment]
    tax: Taxonomy
    phrases: PhraseBook
    vocab: Vocabulary | None = None
    model: seq2seq.ModelParams | None = None


def default_deps(
    env_config=None, taxonomy_config=None, phrase_config=None, checkpoint=None, vocab_path=None
) -> ServiceDeps:
    envs = load_environments(env_config)
    tax = faults.load_taxonomy(taxonomy_config)
    phrases = templates.load_phrases(phrase_config)
    vocab = features.load_vocab(vocab_path) if vocab_path else None
    model = None
    if checkpoint:
        expected = vocab.content_hash() if vocab else None
        model = seq2seq.load_checkpoint(checkpoint, expected)
    return ServiceDeps(envs=envs, tax=tax, phrases=phrases, vocab=vocab, model=model)


@dataclass
class EpisodeState:
    index: int
    trace: EpisodeTrace
    cause: str
    object_name: str
    explanation: str
    cause_options: tuple  # cause ids in seeded-random order
    recovery_options: tuple  # recovery ids in seeded-random order
    answered: bool = False
    cause_choice: str | None = None
    recovery_choice: str | None = None
    cause_correct: bool | None = None
    recovery_correct: bool | None = None
    resumed: bool | None = None


@dataclass
class Session:
    id: str
    condition: str
    env_id: str
    seed: int
    episodes: list
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def answered(self) -> int:
        return sum(1 for ep in self.episodes if ep.answered)


def failure_context(trace: EpisodeTrace, tax: Taxonomy) -> FailureContext:
    detection = faults.detect_failure(trace.last_state, trace.fault, tax)
    return FailureContext(
        failed_action=detection.detecting_action,
        last_success=templates.latest_completed(trace.last_state),
        cause=trace.fault.cause,
        object_name=trace.fault.obj.name,
    )


def condition_explanation(trace: EpisodeTrace, condition: str, deps: ServiceDeps) -> str:
    """The explanation string the console shows for one failed episode."""
    if condition == "None":
        return ""
    if condition == "CB-H-M":
        env = deps.envs[trace.env_id]
        fv = features.extract_features(trace.last_state, env, trace.task, deps.vocab)
        return seq2seq.greedy_decode(deps.model, fv, deps.vocab)
    ctx = failure_context(trace, deps.tax)
    return templates.scripted_explanation(ExplanationType.from_label(condition), ctx, deps.phrases)


def keyframes(trace: EpisodeTrace) -> list:
    """Pre-failure states where the action-status vector changed."""
    frames = []
    phases = trace.phases()
    previous = None
    for state, phase in zip(trace.states, phases):
        if phase == "error":
            break
        if previous is None or state.action_status != previous.action_status:
            frames.append(state)
        previous = state
    return frames


def judge_submission(episode: EpisodeState, cause_id: str, recovery_id: str, deps: ServiceDeps) -> dict:
    """Score one (cause, recovery) choice and, when the recovery is right, resume the plan.

    This is the single scoring path: sessions and any probe of the recovery loop
    go through it.
    """
    if cause_id not in deps.tax.causes:
        raise DomainError("unknown_choice", f"unknown cause id: {cause_id!r}")
    all_recoveries = {r.resolution.id: r.resolution for r in deps.tax.records}
    if recovery_id not in all_recoveries:
        raise DomainError("unknown_choice", f"unknown recovery id: {recovery_id!r}")
    env = deps.envs[episode.trace.env_id]
    cause_correct = cause_id == episode.cause
    recovery_correct = recovery_id == resolution_for(episode.cause, deps.tax).id
    new_trace = resume_with_recovery(
        episode.trace, all_recoveries[recovery_id], env, deps.tax, deps.phrases
    )
    resumed = classify_state(new_trace.last_state) is StateClass.TERMINAL_SUCCESS
    return {
        "trace": new_trace,
        "cause_correct": cause_correct,
        "recovery_correct": recovery_correct,
        "resumed": resumed,
    }


def macro_f1(pairs: list, classes: tuple) -> float:
    """Macro-averaged F1 over a fixed class set for (true, chosen) pairs."""
    if not pairs:
        return 0.0
    scores = []
    for cls in classes:
        tp = sum(1 for t, p in pairs if t == cls and p == cls)
        fp = sum(1 for t, p in pairs if t != cls and p == cls)
        fn = sum(1 for t, p in pairs if t == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / len(scores)


def session_score(session: Session, tax: Taxonomy) -> dict:
    answered = [ep for ep in session.episodes if ep.answered]
    fid_pairs = [(ep.cause, ep.cause_choice) for ep in answered]
    sid_pairs = [
        (resolution_for(ep.cause, tax).id, ep.recovery_choice) for ep in answered
    ]
    recovery_ids = tuple(r.resolution.id for r in tax.records)
    return {
        "answered": len(answered),
        "total": len(session.episodes),
        "fid_correct": sum(1 for ep in answered if ep.cause_correct),
        "sid_correct": sum(1 for ep in answered if ep.recovery_correct),
        "fid_f1": macro_f1(fid_pairs, tax.causes),
        "sid_f1": macro_f1(sid_pairs, recovery_ids),
    }


class SessionStore:
    """In-memory sessions with an optional append-only transcript for restarts."""

    def __init__(self, deps: ServiceDeps, transcript_path: "str | Path | None" = None):
        self.deps = deps
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._transcript = Path(transcript_path) if transcript_path else None
        if self._transcript and self._transcript.exists():
            self._replay()

    # -- persistence --------------------------------------------------------

    def _append(self, event: dict) -> None:
        if self._transcript is None:
            return
        with open(self._transcript, "a") as fh:
            fh.write(json.dumps(event, separators=(",", ":")) + "\n")

    def _replay(self) -> None:
        for line in self._transcript.read_text().splitlines():
            event = json.loads(line)
            if event["event"] == "create":
                self.create_session(
                    event["condition"], event["env"], event["seed"],
                    session_id=event["session_id"], record=False,
                )
            elif event["event"] == "submit":
                self.submit(
                    event["session_id"], event["index"],
                    event["cause_id"], event["recovery_id"], record=False,
                )

    # -- operations ----------------------------------------------------------

    def create_session(
        self,
        condition: str,
        env_id: str,
        seed: int,
        session_id: str | None = None,
        record: bool = True,
    ) -> Session:
        if condition not in CONDITIONS:
            raise DomainError("invalid_condition", f"condition must be one of {CONDITIONS}")
        if condition == "CB-H-M" and (self.deps.model is None or self.deps.vocab is None):
            raise DomainError(
                "no_checkpoint", "CB-H-M sessions need a trained checkpoint and vocabulary", status=409
            )
        if env_id not in self.deps.envs:
            raise DomainError("unknown_environment", f"unknown environment: {env_id!r}")
        env = self.deps.envs[env_id]
        session = Session(
            id=session_id or uuid.uuid4().hex[:12],
            condition=condition,
            env_id=env_id,
            seed=seed,
            episodes=self._build_episodes(env, condition, seed),
        )
        with self._lock:
            self._sessions[session.id] = session
        if record:
            self._append(
                {"event": "create", "session_id": session.id, "condition": condition, "env": env_id, "seed": seed}
            )
        return session

    def _build_episodes(self, env: Environment, condition: str, seed: int) -> list:
        tax = self.deps.tax
        rng = random.Random(f"{seed}:session")
        specs = []
        for rep in range(2):
            for ci, cause in enumerate(tax.causes):
                obj = env.objects[(ci + 3 * rep + seed) % len(env.objects)]
                specs.append((cause, obj))
        rng.shuffle(specs)
        episodes = []
        for index, (cause, obj) in enumerate(specs):
            task = make_task(env, obj.name)
            trace = run_episode(
                env, task, FaultSpec(cause, obj),
                seed=seed * 7919 + index,
                episode_id=f"{env.id}-s{seed}-e{index:02d}",
                tax=tax, phrases=self.deps.phrases,
            )
            option_rng = random.Random(f"{seed}:options:{index}")
            cause_options = list(tax.causes)
            option_rng.shuffle(cause_options)
            recovery_options = [r.resolution.id for r in tax.records]
            option_rng.shuffle(recovery_options)
            episodes.append(
                EpisodeState(
                    index=index,
                    trace=trace,
                    cause=cause,
                    object_name=obj.name,
                    explanation=condition_explanation(trace, condition, self.deps),
                    cause_options=tuple(cause_options),
                    recovery_options=tuple(recovery_options),
                )
            )
        return episodes

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise DomainError("unknown_session", f"no session {session_id!r}", status=404)
        return session

    def episode(self, session_id: str, index: int) -> EpisodeState:
        session = self.get(session_id)
        if not 0 <= index < len(session.episodes):
            raise DomainError(
                "episode_out_of_range",
                f"episode index {index} outside 0..{len(session.episodes) - 1}",
                status=404,
            )
        return session.episodes[index]

    def submit(
        self,
        session_id: str,
        index: int,
        cause_id: str,
        recovery_id: str,
        record: bool = True,
    ) -> dict:
        session = self.get(session_id)
        with session.lock:
            episode = self.episode(session_id, index)
            if episode.answered:
                raise DomainError("already_answered", f"episode {index} was already answered", status=409)
            verdict = judge_submission(episode, cause_id, recovery_id, self.deps)
            episode.trace = verdict["trace"]
            episode.answered = True
            episode.cause_choice = cause_id
            episode.recovery_choice = recovery_id
            episode.cause_correct = verdict["cause_correct"]
            episode.recovery_correct = verdict["recovery_correct"]
            episode.resumed = verdict["resumed"]
        if record:
            self._append(
                {
                    "event": "submit",
                    "session_id": session_id,
                    "index": index,
                    "cause_id": cause_id,
                    "recovery_id": recovery_id,
                }
            )
        return {
            "cause_correct": episode.cause_correct,
            "recovery_correct": episode.recovery_correct,
            "resumed": episode.resumed,
            "final_status": classify_state(episode.trace.last_state).value,
            "final_state": episode.trace.last_state,
            "score": session_score(session, self.deps.tax),
        }

    def score(self, session_id: str) -> dict:
        return session_score(self.get(session_id), self.deps.tax)
