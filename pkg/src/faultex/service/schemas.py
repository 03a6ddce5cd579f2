"""Pydantic request/response models for the recovery-service JSON API."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel


class CreateSessionRequest(BaseModel):
    condition: str
    env: str
    seed: int


class SessionInfo(BaseModel):
    session_id: str
    condition: str
    env: str
    episodes: int


class Option(BaseModel):
    id: str
    label: str


class Keyframe(BaseModel):
    t: int
    position: list[float]
    entity_locations: dict[str, list[float]]
    action_status: list[Optional[int]]


class FinalState(Keyframe):
    failed_action: Optional[str] = None


class FailureView(BaseModel):
    episode_id: str
    index: int
    actions: list[str]
    explanation: str
    cause_options: list[Option]
    recovery_options: list[Option]
    keyframes: list[Keyframe]
    final_state: FinalState
    answered: bool


class RecoveryRequest(BaseModel):
    cause_id: str
    recovery_id: str


class Score(BaseModel):
    answered: int
    total: int
    fid_correct: int
    sid_correct: int
    fid_f1: float
    sid_f1: float


class ScoreFeedback(BaseModel):
    cause_correct: bool
    recovery_correct: bool
    resumed: bool
    final_status: str
    final_state: Keyframe
    score: Score


class ErrorBody(BaseModel):
    code: str
    message: str
