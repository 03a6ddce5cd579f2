"""Fault taxonomy: failure types, causes, causal groups, detection, and resolutions."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .worldmodel import ACTIONS, ConfigError, Entity, EntityKind, RobotState

N_CAUSES = 6


class FailureType(str, Enum):
    NAVIGATION = "navigation"
    OBJECT_DETECTION = "object_detection"
    ARM_MOTION_PLANNING = "arm_motion_planning"
    PERCEPTION_SEGMENTATION = "perception_segmentation"


class CausalGroup(str, Enum):
    INTERNAL = "Internal"
    EXTERNAL = "External"


class UnknownFailureError(ValueError):
    """An errored action is not mapped to any cause in the taxonomy."""


@dataclass(frozen=True)
class RecoveryAction:
    """A human fix for a failure cause; never part of the robot's action space."""

    id: str
    description: str

    def __post_init__(self):
        if self.id in ACTIONS:
            raise ValueError(f"recovery action {self.id!r} collides with a robot action")


@dataclass(frozen=True)
class FailureRecord:
    cause: str
    failure_type: FailureType
    group: CausalGroup
    detecting_action: str
    resolution: RecoveryAction


@dataclass(frozen=True)
class FaultSpec:
    """One injected fault: a cause applied to a target object."""

    cause: str
    obj: Entity

    def __post_init__(self):
        if self.obj.kind is not EntityKind.OBJECT:
            raise ValueError("faults are injected on objects, not places")


@dataclass(frozen=True)
class FaultDetection:
    """Result of diagnosing a failed state."""

    detecting_action: str
    cause: str | None
    candidates: tuple[str, ...]


@dataclass(frozen=True)
class Taxonomy:
    records: tuple[FailureRecord, ...]

    @property
    def causes(self) -> tuple[str, ...]:
        return tuple(r.cause for r in self.records)

    def record(self, cause: str) -> FailureRecord:
        for r in self.records:
            if r.cause == cause:
                return r
        raise KeyError(f"unknown failure cause: {cause!r}")

    def causes_for_detector(self, action: str) -> tuple[str, ...]:
        return tuple(r.cause for r in self.records if r.detecting_action == action)


def validate_taxonomy(records: "tuple[FailureRecord, ...]") -> None:
    """Raise ConfigError naming the violated invariant, if any."""
    if len(records) != N_CAUSES:
        raise ConfigError(f"taxonomy must define exactly {N_CAUSES} causes, got {len(records)}")
    causes = [r.cause for r in records]
    if len(set(causes)) != len(causes):
        raise ConfigError("taxonomy cause ids must be unique")
    for r in records:
        if r.detecting_action not in ACTIONS:
            raise ConfigError(f"cause {r.cause!r}: detecting_action {r.detecting_action!r} not in the action space")
    res_ids = [r.resolution.id for r in records]
    if len(set(res_ids)) != len(res_ids):
        raise ConfigError("taxonomy resolution ids must be unique")


def _default_taxonomy_path() -> Path | None:
    cfg_dir = os.environ.get("FAULTEX_CONFIG_DIR")
    if cfg_dir:
        candidate = Path(cfg_dir) / "taxonomy.json"
        if candidate.exists():
            return candidate
    return None


def load_taxonomy(path: "str | Path | None" = None) -> Taxonomy:
    """Load a taxonomy config; bundled defaults unless overridden."""
    if path is None:
        path = _default_taxonomy_path()
    if path is None:
        text = resources.files("faultex.configs").joinpath("taxonomy.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if not isinstance(doc.get("version"), int):
        raise ConfigError("taxonomy config: missing integer 'version'")
    records = []
    for raw in doc.get("causes", ()):
        try:
            rec = FailureRecord(
                cause=raw["cause"],
                failure_type=FailureType(raw["failure_type"]),
                group=CausalGroup(raw["group"]),
                detecting_action=raw["detecting_action"],
                resolution=RecoveryAction(raw["resolution"]["id"], raw["resolution"]["description"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"taxonomy config: bad cause entry: {exc}") from exc
        records.append(rec)
    records = tuple(records)
    validate_taxonomy(records)
    return Taxonomy(records)


@lru_cache(maxsize=1)
def default_taxonomy() -> Taxonomy:
    return load_taxonomy()


def taxonomy() -> list[FailureRecord]:
    """The six failure records of the bundled fault tree."""
    return list(default_taxonomy().records)


def detect_failure(
    state: RobotState,
    ground_truth: FaultSpec | None = None,
    tax: Taxonomy | None = None,
) -> FaultDetection | None:
    """Diagnose a failed state from its errored action, or None if nothing errored.

    When the errored action maps to several causes the ground truth, if given,
    disambiguates; otherwise the cause is left None.
    """
    tax = tax or default_taxonomy()
    errored = [a for a, s in zip(ACTIONS, state.action_status) if s == -1]
    if not errored:
        return None
    action = errored[0]
    candidates = tax.causes_for_detector(action)
    if not candidates:
        raise UnknownFailureError(f"errored action {action!r} is not mapped by the taxonomy")
    cause = None
    if len(candidates) == 1:
        cause = candidates[0]
    if ground_truth is not None:
        if ground_truth.cause not in candidates:
            raise UnknownFailureError(
                f"ground-truth cause {ground_truth.cause!r} is not detected by {action!r}"
            )
        cause = ground_truth.cause
    return FaultDetection(detecting_action=action, cause=cause, candidates=candidates)


def resolution_for(cause: str, tax: Taxonomy | None = None) -> RecoveryAction:
    """The unique recovery action for a cause."""
    tax = tax or default_taxonomy()
    return tax.record(cause).resolution
