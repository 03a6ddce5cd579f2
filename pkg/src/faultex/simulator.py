"""Discrete-time pick-and-place episodes with injected faults and human recovery."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

from . import faults, templates
from .faults import FaultSpec, RecoveryAction, Taxonomy
from .templates import ExplanationType, FailureContext, PhraseBook
from .worldmodel import (
    ACTIONS,
    ZERO3,
    Entity,
    EntityKind,
    Environment,
    RobotState,
    StateClass,
    TaskSpec,
    Vec3,
    build_environment,
    classify_state,
    distance,
    init_state,
    make_task,
)

BASE_SPEED = 0.5  # m/s, straight-line base motion
DT = 1.0  # s per timestep
REACH_RADIUS = 0.9  # m, beyond this findgrasp cannot reach
CLEARANCE_RADIUS = 0.05  # m, closer than this findgrasp has no clearance
OCCLUDER_OFFSET = 0.15  # m, occluder sits this far from the target on the line of sight
STORAGE_POSITION: Vec3 = (-2.0, -2.0, 0.0)  # where a "not present" object ends up

M_ERROR_STEPS = 10
N_MIN, N_MAX = 15, 20
# Six pre-error step counts summing to 115 = 1380 * 6/72; shuffled per block
# so a batch of 6k episodes totals exactly 1380 * k/12 non-error timesteps.
PAPER_COUNT_BLOCK = (18, 19, 19, 19, 20, 20)

# Ticks each non-motion action takes when nothing goes wrong.
ACTION_TICKS = {"segment": 3, "detect": 2, "findgrasp": 3, "grasp": 2, "lift": 2, "place": 2}

# Plan-order prerequisites: these must be completed before an action may run.
PRECONDITIONS = {
    "move": (),
    "segment": ("move",),
    "detect": ("segment",),
    "findgrasp": ("detect",),
    "grasp": ("findgrasp",),
    "lift": ("grasp",),
    "place": ("lift", "move"),
}


class PlanOrderError(ValueError):
    """An action was attempted before its prerequisites completed."""


@dataclass(frozen=True)
class StepParams:
    """Per-tick parameters for one plan step."""

    target: Entity | None = None
    place: Entity | None = None
    final_tick: bool = False


@dataclass(frozen=True)
class PlanStep:
    action: str
    target: Entity | None = None
    place: Entity | None = None


@dataclass(frozen=True)
class Plan:
    steps: tuple[PlanStep, ...]


@dataclass(frozen=True)
class EpisodeTrace:
    """Timestep-ordered states with per-timestep annotations for one episode."""

    episode_id: str
    env_id: str
    task: TaskSpec
    fault: FaultSpec | None
    states: tuple[RobotState, ...]
    annotations: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if len(self.states) != len(self.annotations):
            raise ValueError("every timestep needs an annotation")

    @property
    def last_state(self) -> RobotState:
        return self.states[-1]

    def phases(self) -> tuple[str, ...]:
        return tuple("error" if any(s == -1 for s in st.action_status) else "success" for st in self.states)


def make_plan(env: Environment, task: TaskSpec) -> Plan:
    """The pick-and-place plan: fetch the target at the source, carry it to the destination."""
    t, src, dst = task.target_object, task.source, task.destination
    return Plan(
        steps=(
            PlanStep("move", place=src),
            PlanStep("segment", place=src),
            PlanStep("detect", target=t),
            PlanStep("findgrasp", target=t),
            PlanStep("grasp", target=t),
            PlanStep("lift", target=t),
            PlanStep("move", place=dst),
            PlanStep("place", target=t, place=dst),
        )
    )


def _check_preconditions(state: RobotState, action: str) -> None:
    for prereq in PRECONDITIONS[action]:
        if state.status_of(prereq) != 1:
            raise PlanOrderError(f"{action!r} requires {prereq!r} to be completed first")


def _vec_add(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _vec_sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _vec_scale(a: Vec3, k: float) -> Vec3:
    return (a[0] * k, a[1] * k, a[2] * k)


def step_action(state: RobotState, action: str, params: StepParams) -> RobotState:
    """Advance the state by one tick of the given action.

    Move interpolates toward the target place at constant speed and completes on
    arrival; non-motion actions hold the base still and complete on their final
    tick. Completion sets the action's status to 1.
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action: {action!r}")
    for entity in (params.target, params.place):
        if entity is not None and entity not in state.entity_locations:
            raise ValueError(f"action parameter references unknown entity: {entity.name!r}")
    _check_preconditions(state, action)

    if action == "move":
        if params.place is None:
            raise ValueError("move requires a place parameter")
        goal = state.entity_locations[params.place]
        dist = distance(state.position, goal)
        if dist <= BASE_SPEED * DT:
            new_pos, arrived = goal, True
        else:
            direction = _vec_scale(_vec_sub(goal, state.position), 1.0 / dist)
            new_pos, arrived = _vec_add(state.position, _vec_scale(direction, BASE_SPEED * DT)), False
        velocity = _vec_scale(_vec_sub(new_pos, state.position), 1.0 / DT)
        return replace(
            state,
            position=new_pos,
            linear_velocity=velocity,
            angular_velocity=ZERO3,
            action_status=_set(state, action, 1 if arrived else 0),
            timestep=state.timestep + 1,
        )

    locations = state.entity_locations
    done = params.final_tick
    if action == "place" and done:
        if params.target is None or params.place is None:
            raise ValueError("place requires target and place parameters")
        locations = dict(locations)
        locations[params.target] = locations[params.place]
    return replace(
        state,
        linear_velocity=ZERO3,
        angular_velocity=ZERO3,
        entity_locations=locations,
        action_status=_set(state, action, 1 if done else 0),
        timestep=state.timestep + 1,
    )


def _set(state: RobotState, action: str, status) -> tuple:
    vec = list(state.action_status)
    vec[ACTIONS.index(action)] = status
    return tuple(vec)


def _stall_tick(state: RobotState, step: PlanStep) -> RobotState:
    """One tick of an action that keeps trying but never completes."""
    if step.action == "move":
        goal = state.entity_locations[step.place]
        if distance(state.position, goal) > 0.0:
            moving = step_action(state, "move", StepParams(place=step.place))
            return replace(moving, action_status=_set(moving, "move", 0))
    return replace(
        state,
        linear_velocity=ZERO3,
        angular_velocity=ZERO3,
        action_status=_set(state, step.action, 0),
        timestep=state.timestep + 1,
    )


def _error_tick(state: RobotState, action: str) -> RobotState:
    """Kinematics frozen while the detecting action reports an error."""
    return replace(
        state,
        linear_velocity=ZERO3,
        angular_velocity=ZERO3,
        action_status=_set(state, action, -1),
        timestep=state.timestep + 1,
    )


def fault_displacements(env: Environment, fault: FaultSpec, seed: int) -> dict[Entity, Vec3]:
    """Scene amendments an injected fault makes before the episode starts.

    Internal causes change nothing; external causes displace entities, which is
    what makes them visually apparent.
    """
    rng = random.Random(f"{seed}:inject")
    target = fault.obj
    target_pos = env.layout[target]
    source_pos = env.layout[env.places[0]]
    others = [o for o in env.objects if o != target]
    if fault.cause == "object not present":
        return {target: STORAGE_POSITION}
    if fault.cause == "object occluded":
        occluder = rng.choice(others)
        gap = distance(source_pos, target_pos)
        toward_robot = _vec_scale(_vec_sub(source_pos, target_pos), 1.0 / gap)
        return {occluder: _vec_add(target_pos, _vec_scale(toward_robot, OCCLUDER_OFFSET))}
    if fault.cause == "object too far away":
        gap = distance(source_pos, target_pos)
        outward = _vec_scale(_vec_sub(target_pos, source_pos), 1.0 / gap)
        beyond_reach = (REACH_RADIUS + CLEARANCE_RADIUS + REACH_RADIUS) / 2.0  # 1.2 m < AOI radius
        return {target: _vec_add(source_pos, _vec_scale(outward, beyond_reach))}
    if fault.cause == "object too close to others":
        neighbors = rng.sample(others, 2)
        offset = CLEARANCE_RADIUS * 0.8
        return {
            neighbors[0]: _vec_add(target_pos, (offset, 0.0, 0.0)),
            neighbors[1]: _vec_add(target_pos, (-offset, 0.0, 0.0)),
        }
    return {}


def _draw_pre_error_steps(seed: int) -> int:
    return random.Random(f"{seed}:schedule").randint(N_MIN, N_MAX)


def run_episode(
    env: Environment,
    task: TaskSpec,
    fault: FaultSpec | None,
    seed: int,
    pre_error_steps: int | None = None,
    episode_id: str | None = None,
    tax: Taxonomy | None = None,
    phrases: PhraseBook | None = None,
) -> EpisodeTrace:
    """Run one episode; with a fault it ends in error timesteps, otherwise in success."""
    tax = tax or faults.default_taxonomy()
    if fault is not None:
        if fault.cause not in tax.causes:
            raise ValueError(f"unknown fault cause: {fault.cause!r}")
        if fault.obj not in env.objects:
            raise ValueError(f"fault object {fault.obj.name!r} is not in environment {env.id!r}")
        if fault.obj != task.target_object:
            raise ValueError("faults are injected on the task's target object")
    if episode_id is None:
        episode_id = f"{env.id}-{seed}"

    plan = make_plan(env, task)
    st = init_state(env, task)
    detecting = None
    fault_step_idx = None
    n = None
    if fault is not None:
        detecting = tax.record(fault.cause).detecting_action
        fault_step_idx = next(i for i, s in enumerate(plan.steps) if s.action == detecting)
        st = replace(st, entity_locations={**st.entity_locations, **fault_displacements(env, fault, seed)})
        n = pre_error_steps if pre_error_steps is not None else _draw_pre_error_steps(seed)
        if not N_MIN <= n <= N_MAX:
            raise ValueError(f"pre-error step count {n} outside [{N_MIN}, {N_MAX}]")

    states: list[RobotState] = []
    notes: list[str] = []

    for idx, step in enumerate(plan.steps):
        if fault is not None and idx == fault_step_idx:
            if st.timestep >= n:
                raise ValueError(f"fault schedule unreachable: plan reaches {detecting!r} after timestep {n}")
            _check_preconditions(st, step.action)
            while st.timestep < n:
                st = _stall_tick(st, step)
                states.append(st)
                notes.append(templates.rationalize(st, env, task, phrases))
            ctx = FailureContext(
                failed_action=detecting,
                last_success=templates.latest_completed(st),
                cause=fault.cause,
                object_name=fault.obj.name,
            )
            err_text = templates.scripted_explanation(ExplanationType.CB_H, ctx, phrases)
            for _ in range(M_ERROR_STEPS):
                st = _error_tick(st, detecting)
                states.append(st)
                notes.append(err_text)
            break
        ticks = ACTION_TICKS.get(step.action)
        while True:
            final = ticks == 1
            st = step_action(st, step.action, StepParams(target=step.target, place=step.place, final_tick=final))
            states.append(st)
            notes.append(templates.rationalize(st, env, task, phrases))
            if step.action == "move":
                if st.status_of("move") == 1:
                    break
            else:
                ticks -= 1
                if st.status_of(step.action) == 1:
                    break

    return EpisodeTrace(
        episode_id=episode_id,
        env_id=env.id,
        task=task,
        fault=fault,
        states=tuple(states),
        annotations=tuple(notes),
        seed=seed,
    )


def resume_with_recovery(
    trace: EpisodeTrace,
    recovery: RecoveryAction,
    env: Environment | None = None,
    tax: Taxonomy | None = None,
    phrases: PhraseBook | None = None,
) -> EpisodeTrace:
    """Apply a human recovery to a halted episode.

    The correct resolution amends the scene, retries the failed action, and runs
    the plan to completion; a wrong one appends exactly one more error timestep.
    """
    tax = tax or faults.default_taxonomy()
    last = trace.last_state
    if classify_state(last) is not StateClass.FAILED:
        raise ValueError("recovery applies only to failed episodes")
    if trace.fault is None:
        raise ValueError("failed trace carries no fault specification")
    if env is None:
        env = build_environment(trace.env_id)

    cause = trace.fault.cause
    detecting = tax.record(cause).detecting_action
    if recovery.id != faults.resolution_for(cause, tax).id:
        st = _error_tick(last, detecting)
        return replace(
            trace,
            states=trace.states + (st,),
            annotations=trace.annotations + (trace.annotations[-1],),
        )

    displaced = fault_displacements(env, trace.fault, trace.seed)
    locations = dict(last.entity_locations)
    for entity in displaced:
        locations[entity] = env.layout[entity]
    st = replace(last, entity_locations=locations, action_status=_set(last, detecting, None))

    plan = make_plan(env, trace.task)
    resume_idx = next(i for i, s in enumerate(plan.steps) if s.action == detecting)
    states: list[RobotState] = []
    notes: list[str] = []
    for step in plan.steps[resume_idx:]:
        ticks = ACTION_TICKS.get(step.action)
        while True:
            final = ticks == 1
            st = step_action(st, step.action, StepParams(target=step.target, place=step.place, final_tick=final))
            states.append(st)
            notes.append(templates.rationalize(st, env, trace.task, phrases))
            if step.action == "move":
                if st.status_of("move") == 1:
                    break
            else:
                ticks -= 1
                if st.status_of(step.action) == 1:
                    break
    return replace(trace, states=trace.states + tuple(states), annotations=trace.annotations + tuple(notes))


def generate_batch(
    env: Environment,
    count: int,
    seed: int,
    match_paper_counts: bool = False,
    tax: Taxonomy | None = None,
    phrases: PhraseBook | None = None,
) -> list[EpisodeTrace]:
    """Generate a batch of faulted episodes with uniform cause coverage.

    Causes cycle fastest and the object rotates across cause blocks, so a batch
    of 30k episodes covers every (object, cause) pair exactly k times.
    """
    tax = tax or faults.default_taxonomy()
    if count <= 0 or count % len(tax.causes) != 0:
        raise ValueError(f"episode count must be a positive multiple of {len(tax.causes)}")
    rng = random.Random(f"{seed}:batch")
    schedule: list[int] = []
    if match_paper_counts:
        for _ in range(count // len(PAPER_COUNT_BLOCK)):
            block = list(PAPER_COUNT_BLOCK)
            rng.shuffle(block)
            schedule.extend(block)
    else:
        schedule = [rng.randint(N_MIN, N_MAX) for _ in range(count)]

    traces = []
    causes = tax.causes
    for i in range(count):
        cause = causes[i % len(causes)]
        obj = env.objects[(i % len(causes) + i // len(causes)) % len(env.objects)]
        task = make_task(env, obj.name)
        traces.append(
            run_episode(
                env,
                task,
                FaultSpec(cause, obj),
                seed=seed * 1_000_003 + i,
                pre_error_steps=schedule[i],
                episode_id=f"{env.id}-{i:03d}",
                tax=tax,
                phrases=phrases,
            )
        )
    return traces


# --- trace files: one header line, then one JSON record per timestep ---

TRACE_SCHEMA_VERSION = 1


def _entity_key(e: Entity) -> str:
    return e.name


def dumps_trace(trace: EpisodeTrace) -> str:
    env_entities = sorted(trace.states[0].entity_locations, key=lambda e: (e.kind.value, e.name))
    header = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "episode_id": trace.episode_id,
        "env_id": trace.env_id,
        "entities": [{"name": e.name, "kind": e.kind.value} for e in env_entities],
        "task": {
            "target_object": trace.task.target_object.name,
            "source": trace.task.source.name,
            "destination": trace.task.destination.name,
        },
        "fault": None if trace.fault is None else {"cause": trace.fault.cause, "object": trace.fault.obj.name},
        "seed": trace.seed,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    phases = trace.phases()
    for st, note, phase in zip(trace.states, trace.annotations, phases):
        row = {
            "episode_id": trace.episode_id,
            "t": st.timestep,
            "position": list(st.position),
            "angular_velocity": list(st.angular_velocity),
            "linear_velocity": list(st.linear_velocity),
            "entity_locations": {e.name: list(st.entity_locations[e]) for e in env_entities},
            "action_status": list(st.action_status),
            "annotation_text": note,
            "phase": phase,
        }
        lines.append(json.dumps(row, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def loads_trace(text: str) -> EpisodeTrace:
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise ValueError(f"unsupported trace schema version: {header.get('schema_version')!r}")
    entities = {raw["name"]: Entity(raw["name"], EntityKind(raw["kind"])) for raw in header["entities"]}
    task = TaskSpec(
        target_object=entities[header["task"]["target_object"]],
        source=entities[header["task"]["source"]],
        destination=entities[header["task"]["destination"]],
    )
    fault = None
    if header["fault"] is not None:
        fault = FaultSpec(header["fault"]["cause"], entities[header["fault"]["object"]])
    states, notes = [], []
    for line in lines[1:]:
        row = json.loads(line)
        states.append(
            RobotState(
                position=tuple(row["position"]),
                angular_velocity=tuple(row["angular_velocity"]),
                linear_velocity=tuple(row["linear_velocity"]),
                entity_locations={entities[name]: tuple(pos) for name, pos in row["entity_locations"].items()},
                action_status=tuple(row["action_status"]),
                timestep=row["t"],
            )
        )
        notes.append(row["annotation_text"])
    return EpisodeTrace(
        episode_id=header["episode_id"],
        env_id=header["env_id"],
        task=task,
        fault=fault,
        states=tuple(states),
        annotations=tuple(notes),
        seed=header["seed"],
    )


def write_trace(trace: EpisodeTrace, path: "str | Path") -> None:
    Path(path).write_text(dumps_trace(trace))


def read_trace(path: "str | Path") -> EpisodeTrace:
    return loads_trace(Path(path).read_text())
