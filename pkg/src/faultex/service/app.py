"""FastAPI wrapper around the session store."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..faults import detect_failure
from ..worldmodel import ACTIONS
from . import schemas
from .sessions import DomainError, ServiceDeps, SessionStore, default_deps, keyframes


def _keyframe(state) -> schemas.Keyframe:
    return schemas.Keyframe(
        t=state.timestep,
        position=list(state.position),
        entity_locations={e.name: list(pos) for e, pos in sorted(state.entity_locations.items(), key=lambda kv: kv[0].name)},
        action_status=list(state.action_status),
    )


def create_app(deps: ServiceDeps | None = None, transcript_path=None) -> FastAPI:
    deps = deps or default_deps()
    store = SessionStore(deps, transcript_path)
    app = FastAPI(title="faultex recovery service")
    app.state.store = store

    @app.exception_handler(DomainError)
    async def domain_error_handler(_: Request, exc: DomainError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.post("/sessions", response_model=schemas.SessionInfo, status_code=201)
    def create_session(req: schemas.CreateSessionRequest):
        session = store.create_session(req.condition, req.env, req.seed)
        return schemas.SessionInfo(
            session_id=session.id,
            condition=session.condition,
            env=session.env_id,
            episodes=len(session.episodes),
        )

    @app.get("/sessions/{session_id}/episodes/{index}", response_model=schemas.FailureView)
    def get_failure_view(session_id: str, index: int):
        episode = store.episode(session_id, index)
        trace = episode.trace
        last = trace.last_state
        detection = detect_failure(last, trace.fault, deps.tax)
        final = _keyframe(last)
        cause_labels = {c: c for c in deps.tax.causes}
        recovery_labels = {r.resolution.id: r.resolution.description for r in deps.tax.records}
        return schemas.FailureView(
            episode_id=trace.episode_id,
            index=episode.index,
            actions=list(ACTIONS),
            explanation=episode.explanation,
            cause_options=[schemas.Option(id=c, label=cause_labels[c]) for c in episode.cause_options],
            recovery_options=[
                schemas.Option(id=r, label=recovery_labels[r]) for r in episode.recovery_options
            ],
            keyframes=[_keyframe(s) for s in keyframes(trace)],
            final_state=schemas.FinalState(
                **final.model_dump(),
                failed_action=None if detection is None else detection.detecting_action,
            ),
            answered=episode.answered,
        )

    @app.post("/sessions/{session_id}/episodes/{index}/recovery", response_model=schemas.ScoreFeedback)
    def submit_recovery(session_id: str, index: int, req: schemas.RecoveryRequest):
        feedback = store.submit(session_id, index, req.cause_id, req.recovery_id)
        return schemas.ScoreFeedback(
            cause_correct=feedback["cause_correct"],
            recovery_correct=feedback["recovery_correct"],
            resumed=feedback["resumed"],
            final_status=feedback["final_status"],
            final_state=_keyframe(feedback["final_state"]),
            score=schemas.Score(**feedback["score"]),
        )

    @app.get("/sessions/{session_id}/score", response_model=schemas.Score)
    def get_score(session_id: str):
        return schemas.Score(**store.score(session_id))

    return app
