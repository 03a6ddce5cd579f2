"""Scripted error explanations (AB, CB, AB-H, CB-H) and non-error rationalizations."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .worldmodel import (
    ACTIONS,
    ConfigError,
    Environment,
    RobotState,
    StateClass,
    TaskSpec,
    classify_state,
)

# Precedence used to name the most recently completed action from a status
# vector alone. Move appears twice in the plan, so it ranks last: while the
# carried object is being moved, "lift" is still the latest finished action.
COMPLETED_PRECEDENCE = ("place", "lift", "grasp", "findgrasp", "detect", "segment", "move")


class NoExplanationError(ValueError):
    """The None study condition provides no explanation."""


class ExplanationType(Enum):
    NONE = "None"
    AB = "AB"
    CB = "CB"
    AB_H = "AB-H"
    CB_H = "CB-H"

    @classmethod
    def from_label(cls, label: str) -> "ExplanationType":
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"unknown explanation type: {label!r}")


@dataclass(frozen=True)
class FailureContext:
    """The slots an explanation draws from: failed action, history, and cause."""

    failed_action: str
    last_success: str | None
    cause: str
    object_name: str


@dataclass(frozen=True)
class CauseClauses:
    history_clause: str
    failed_clause: str
    failed_clause_history: str
    context_clause: str
    context_clause_history: str


@dataclass(frozen=True)
class PhraseBook:
    """Per-cause explanation clauses plus per-action rationale phrases."""

    explanations: dict[str, CauseClauses]
    rationales: dict[str, dict[str, str]]
    start_phrase: str

    def clauses(self, cause: str) -> CauseClauses:
        if cause not in self.explanations:
            raise KeyError(f"no explanation clauses for cause {cause!r}")
        return self.explanations[cause]


def _default_phrases_path() -> Path | None:
    cfg_dir = os.environ.get("FAULTEX_CONFIG_DIR")
    if cfg_dir:
        candidate = Path(cfg_dir) / "phrases.json"
        if candidate.exists():
            return candidate
    return None


def load_phrases(path: "str | Path | None" = None) -> PhraseBook:
    if path is None:
        path = _default_phrases_path()
    if path is None:
        text = resources.files("faultex.configs").joinpath("phrases.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if not isinstance(doc.get("version"), int):
        raise ConfigError("phrase config: missing integer 'version'")
    explanations = {}
    for cause, raw in doc.get("explanations", {}).items():
        try:
            explanations[cause] = CauseClauses(
                history_clause=raw["history_clause"],
                failed_clause=raw["failed_clause"],
                failed_clause_history=raw["failed_clause_history"],
                context_clause=raw["context_clause"],
                context_clause_history=raw["context_clause_history"],
            )
        except KeyError as exc:
            raise ConfigError(f"phrase config: cause {cause!r} is missing clause {exc}") from exc
    rationales = doc.get("rationales", {})
    for action in ACTIONS:
        if action not in rationales:
            raise ConfigError(f"phrase config: no rationale phrases for action {action!r}")
        for form in ("active", "completed"):
            if form not in rationales[action]:
                raise ConfigError(f"phrase config: action {action!r} is missing its {form!r} phrase")
    return PhraseBook(explanations=explanations, rationales=rationales, start_phrase=doc.get("start_phrase", ""))


@lru_cache(maxsize=1)
def default_phrases() -> PhraseBook:
    return load_phrases()


def _sentence(clause: str) -> str:
    return clause[0].upper() + clause[1:] + "."


def scripted_explanation(
    etype: ExplanationType,
    ctx: FailureContext,
    phrases: PhraseBook | None = None,
) -> str:
    """Compose the scripted explanation for a failure under one study condition."""
    if etype is ExplanationType.NONE:
        raise NoExplanationError("the None condition carries no explanation")
    book = phrases or default_phrases()
    c = book.clauses(ctx.cause)
    if etype is ExplanationType.AB:
        return _sentence(c.failed_clause)
    if etype is ExplanationType.CB:
        return _sentence(f"{c.failed_clause} because {c.context_clause}")
    if etype is ExplanationType.AB_H:
        return _sentence(f"{c.history_clause} but {c.failed_clause_history}")
    if etype is ExplanationType.CB_H:
        return _sentence(
            f"{c.history_clause}, but {c.failed_clause_history} because {c.context_clause_history}"
        )
    raise ValueError(f"unsupported explanation type: {etype}")


def active_action(state: RobotState) -> str | None:
    """The action currently marked active, if any."""
    active = [a for a, s in zip(ACTIONS, state.action_status) if s == 0]
    return active[-1] if active else None


def latest_completed(state: RobotState) -> str | None:
    """Most recently completed action, inferred from the status vector."""
    for action in COMPLETED_PRECEDENCE:
        if state.status_of(action) == 1:
            return action
    return None


def _phrase_place(state: RobotState, task: TaskSpec, action: str) -> str:
    # After the lift completes, move/place refer to the destination.
    if action == "place" or state.status_of("lift") == 1:
        return task.destination.name
    return task.source.name


def rationalize(
    state: RobotState,
    env: Environment,
    task: TaskSpec,
    phrases: PhraseBook | None = None,
) -> str:
    """Natural-language rationale for a successful or active timestep."""
    if classify_state(state) is StateClass.FAILED:
        raise ValueError("failed states take an error explanation, not a rationale")
    book = phrases or default_phrases()
    action = active_action(state)
    form = "active"
    if action is None:
        action = latest_completed(state)
        form = "completed"
    if action is None:
        return book.start_phrase
    phrase = book.rationales[action][form]
    return phrase.format(object=task.target_object.name, place=_phrase_place(state, task, action))
