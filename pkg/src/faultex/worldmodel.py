"""Environments, entities, tasks, and the robot state space."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path

# Fixed action order; the per-action status vector follows this order.
ACTIONS = ("move", "segment", "detect", "findgrasp", "grasp", "lift", "place")

N_OBJECTS = 5
N_PLACES = 2

# Action status codes: None = not yet defined, -1 errored, 0 active, 1 completed.
Status = "int | None"
VALID_STATUSES = (None, -1, 0, 1)

Vec3 = tuple[float, float, float]
ZERO3: Vec3 = (0.0, 0.0, 0.0)


class ConfigError(ValueError):
    """A config file violates a structural invariant."""


class InvalidEnvironmentError(ValueError):
    """Unknown environment id with no user-supplied config."""


class InvalidTaskError(ValueError):
    """Task references entities that are not part of the environment."""


class EntityKind(str, Enum):
    OBJECT = "object"
    PLACE = "place"


class StateClass(str, Enum):
    IN_PROGRESS = "in_progress"
    TERMINAL_SUCCESS = "terminal_success"
    FAILED = "failed"


@dataclass(frozen=True)
class Entity:
    """A named thing in the environment: a graspable object or a navigation place."""

    name: str
    kind: EntityKind

    def __post_init__(self):
        if not self.name or self.name != self.name.lower():
            raise ValueError(f"entity name must be a non-empty lowercase string: {self.name!r}")


@dataclass(frozen=True)
class Environment:
    """Five objects, two places, and their default positions."""

    id: str
    objects: tuple[Entity, ...]
    places: tuple[Entity, ...]
    layout: dict[Entity, Vec3]
    kitchen_correspondence: dict[str, str] | None = None

    def entity(self, name: str) -> Entity:
        for e in self.objects + self.places:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def entities(self) -> tuple[Entity, ...]:
        return self.objects + self.places


@dataclass(frozen=True)
class TaskSpec:
    """Move target_object from source to destination."""

    target_object: Entity
    source: Entity
    destination: Entity

    def __post_init__(self):
        if self.source == self.destination:
            raise ValueError("task source and destination must differ")


@dataclass(frozen=True)
class RobotState:
    """Snapshot of the robot and scene at one timestep.

    Immutable after construction; safe to share across threads.
    """

    position: Vec3
    angular_velocity: Vec3
    linear_velocity: Vec3
    entity_locations: dict[Entity, Vec3]
    action_status: tuple  # length 7, entries in VALID_STATUSES, ordered as ACTIONS
    timestep: int

    def __post_init__(self):
        if len(self.action_status) != len(ACTIONS):
            raise ValueError(f"action_status must have {len(ACTIONS)} entries")
        for s in self.action_status:
            if s not in VALID_STATUSES:
                raise ValueError(f"invalid action status: {s!r}")
        for v in (self.angular_velocity, self.linear_velocity, self.position):
            if not all(math.isfinite(x) for x in v):
                raise ValueError("position and velocities must be finite")
        if self.timestep < 0:
            raise ValueError("timestep must be non-negative")

    def status_of(self, action: str):
        return self.action_status[ACTIONS.index(action)]

    def with_status(self, action: str, status) -> "RobotState":
        vec = list(self.action_status)
        vec[ACTIONS.index(action)] = status
        return replace(self, action_status=tuple(vec))


def distance(a: Vec3, b: Vec3) -> float:
    """3D Euclidean distance."""
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def _default_config_path() -> Path | None:
    cfg_dir = os.environ.get("FAULTEX_CONFIG_DIR")
    if cfg_dir:
        candidate = Path(cfg_dir) / "environments.json"
        if candidate.exists():
            return candidate
    return None


def load_environment_config(path: "str | Path | None" = None) -> dict:
    """Load the raw environment config document (bundled defaults unless overridden)."""
    if path is None:
        path = _default_config_path()
    if path is None:
        text = resources.files("faultex.configs").joinpath("environments.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if not isinstance(doc.get("version"), int):
        raise ConfigError("environment config: missing integer 'version'")
    if "environments" not in doc:
        raise ConfigError("environment config: missing 'environments' map")
    return doc


def _parse_environment(env_id: str, raw: dict, registry: dict) -> Environment:
    objects = tuple(Entity(o["name"], EntityKind.OBJECT) for o in raw.get("objects", ()))
    places = tuple(Entity(p["name"], EntityKind.PLACE) for p in raw.get("places", ()))
    if len(objects) != N_OBJECTS:
        raise ConfigError(f"environment {env_id!r}: expected exactly {N_OBJECTS} objects")
    if len(places) != N_PLACES:
        raise ConfigError(f"environment {env_id!r}: expected exactly {N_PLACES} places")
    names = [e.name for e in objects + places]
    if len(set(names)) != len(names):
        raise ConfigError(f"environment {env_id!r}: entity names must be distinct")
    layout: dict[Entity, Vec3] = {}
    for entity, spec in zip(objects + places, list(raw["objects"]) + list(raw["places"])):
        pos = tuple(float(x) for x in spec["position"])
        if len(pos) != 3 or not all(math.isfinite(x) for x in pos):
            raise ConfigError(f"environment {env_id!r}: position of {entity.name!r} must be a finite 3-vector")
        layout[entity] = pos
    correspondence = raw.get("kitchen_correspondence")
    if correspondence is not None:
        _check_correspondence(env_id, objects, places, correspondence, registry)
    return Environment(env_id, objects, places, layout, correspondence)


def _check_correspondence(env_id, objects, places, correspondence, registry):
    """The correspondence must be a bijection on entity roles (object i <-> object i)."""
    kitchen = registry.get("kitchen")
    if kitchen is None:
        raise ConfigError(f"environment {env_id!r}: correspondence given but no 'kitchen' environment")
    k_objects = [o["name"] for o in kitchen["objects"]]
    k_places = [p["name"] for p in kitchen["places"]]
    if sorted(correspondence.values()) != sorted(k_objects + k_places):
        raise ConfigError(f"environment {env_id!r}: correspondence is not onto the kitchen entities")
    for i, obj in enumerate(objects):
        if correspondence.get(obj.name) != k_objects[i]:
            raise ConfigError(f"environment {env_id!r}: object {obj.name!r} must map to kitchen object {k_objects[i]!r}")
    for j, plc in enumerate(places):
        if correspondence.get(plc.name) != k_places[j]:
            raise ConfigError(f"environment {env_id!r}: place {plc.name!r} must map to kitchen place {k_places[j]!r}")


def build_environment(env_id: str, config: "dict | str | Path | None" = None) -> Environment:
    """Build a fully populated environment with its deterministic default layout."""
    if config is None or isinstance(config, (str, Path)):
        doc = load_environment_config(config)
    else:
        doc = config
    envs = doc["environments"]
    if env_id not in envs:
        raise InvalidEnvironmentError(f"unknown environment id: {env_id!r}")
    return _parse_environment(env_id, envs[env_id], envs)


def load_environments(config: "dict | str | Path | None" = None) -> dict[str, Environment]:
    """Build every environment declared in a config document."""
    if config is None or isinstance(config, (str, Path)):
        doc = load_environment_config(config)
    else:
        doc = config
    return {env_id: _parse_environment(env_id, raw, doc["environments"]) for env_id, raw in doc["environments"].items()}


def make_task(env: Environment, target_name: str) -> TaskSpec:
    """Default pick-and-place task: move the named object from place 0 to place 1."""
    target = next((o for o in env.objects if o.name == target_name), None)
    if target is None:
        raise InvalidTaskError(f"object {target_name!r} is not in environment {env.id!r}")
    return TaskSpec(target_object=target, source=env.places[0], destination=env.places[1])


def init_state(env: Environment, task: TaskSpec) -> RobotState:
    """Initial robot state: zero pose, zero velocities, all action statuses undefined."""
    for entity in (task.target_object, task.source, task.destination):
        if entity not in env.layout:
            raise InvalidTaskError(f"task entity {entity.name!r} is absent from environment {env.id!r}")
    if task.target_object not in env.objects:
        raise InvalidTaskError(f"task target {task.target_object.name!r} is not an object of {env.id!r}")
    return RobotState(
        position=ZERO3,
        angular_velocity=ZERO3,
        linear_velocity=ZERO3,
        entity_locations=dict(env.layout),
        action_status=(None,) * len(ACTIONS),
        timestep=0,
    )


def classify_state(state: RobotState) -> StateClass:
    """failed iff any status is -1; terminal_success iff all completed and at rest."""
    if any(s == -1 for s in state.action_status):
        return StateClass.FAILED
    if (
        all(s == 1 for s in state.action_status)
        and state.linear_velocity == ZERO3
        and state.angular_velocity == ZERO3
    ):
        return StateClass.TERMINAL_SUCCESS
    return StateClass.IN_PROGRESS
