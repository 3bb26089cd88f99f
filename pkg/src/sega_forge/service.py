"""Session-oriented HTTP facade for steering live guided runs.

One session holds N particles (independent trajectories sharing a config,
seeded seed..seed+N-1) advanced in lockstep.  Concept edits apply from
the next step onward; momentum is state of the run and survives edits.
Requests to one session are serialized by a per-session lock; different
sessions proceed concurrently.  Every 4xx body is
{"error": {"code", "field", "message"}}.
"""

from __future__ import annotations

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

import click
import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from starlette.concurrency import run_in_threadpool

from .config import (
    ConfigError,
    estimator_from_config,
    guidance_from_config,
    schedule_from_config,
    validate_config,
)
from .diagnostics import mask_report
from .diffusion import Schedule, _step_once, predict_original
from .guidance import ConceptEdit, GuidanceConfig, GuidanceState, ParameterError
from .tensors import Latent, Rng, gaussian_sample

__all__ = ["build_app", "main"]

_RAW_POSITION_LIMIT = 8


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _error(status: int, code: str, field_path: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={
        "error": {"code": code, "field": field_path, "message": message}})


def _guidance_json(config: GuidanceConfig) -> dict:
    return {
        "prompt_condition": config.prompt_condition,
        "guidance_scale": config.guidance_scale,
        "momentum_scale": config.momentum_scale,
        "momentum_beta": config.momentum_beta,
        "concepts": [
            {"condition": c.condition, "edit_scale": c.edit_scale,
             "threshold": c.threshold, "warmup": c.warmup,
             "direction": c.direction, "weight": c.weight}
            for c in config.concepts
        ],
    }


@dataclass
class _Particle:
    seed: int
    z: Latent
    state: GuidanceState
    xhat: Latent | None = None


@dataclass
class _Session:
    id: str
    body: dict
    estimator: object
    schedule: Schedule
    config: GuidanceConfig
    t: int = 0
    particles: list[_Particle] = field(default_factory=list)
    action_log: list[dict] = field(default_factory=list)
    created: str = ""
    updated: str = ""
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def remaining(self) -> int:
        return self.schedule.steps - self.t

    def positions(self) -> list[dict]:
        if self.estimator.dimension <= _RAW_POSITION_LIMIT:
            return [{"seed": p.seed, "position": p.z.data.tolist()} for p in self.particles]
        return [{"seed": p.seed, "norm": float(np.linalg.norm(p.z.data))}
                for p in self.particles]

    def stats(self) -> dict:
        if self.t == 0:
            return {"posteriors": None, "mask_sparsity": None}
        xhats = np.stack([p.xhat.data for p in self.particles])
        posteriors = {
            tag: float(np.mean([
                self.estimator.label_posterior(p.xhat, tag) for p in self.particles]))
            for tag in self.estimator.tags
        }
        last = []
        for p in self.particles:
            masks = p.state.mask_log[-1]
            last.append(float(np.mean([np.count_nonzero(m) / m.size for m in masks]))
                        if masks else 0.0)
        moments = None
        flat = xhats.ravel()
        if flat.size >= 2:
            mean = float(flat.mean())
            centered = flat - mean
            variance = float(np.mean(centered**2))
            if variance > 0.0:
                sigma = variance**0.5
                skew = float(np.mean(centered**3)) / sigma**3
                kurt = float(np.mean(centered**4)) / variance**2 - 3.0
            else:
                skew = kurt = 0.0
            moments = {"mean": mean, "variance": variance, "skewness": skew,
                       "excess_kurtosis": kurt, "count": int(flat.size)}
        return {"posteriors": posteriors,
                "mask_sparsity": float(np.mean(last)),
                "prediction_moments": moments}

    def snapshot(self) -> dict:
        masks = None
        if self.t > 0 and self.particles[0].state.mask_log:
            masks = mask_report(self.particles[0].state).to_json()
        return {
            "id": self.id,
            "created": self.created,
            "updated": self.updated,
            "t": self.t,
            "total_steps": self.schedule.steps,
            "remaining": self.remaining,
            "config": {
                "model": self.body["model"],
                "schedule": self.body["schedule"],
                "guidance": _guidance_json(self.config),
                "particles": len(self.particles),
                "seed": self.body["seed"],
            },
            "particles": self.positions(),
            "stats": self.stats(),
            "reports": {"masks": masks},
            "action_log": list(self.action_log),
        }


def build_app() -> FastAPI:
    """Create a service instance with its own empty session store."""
    app = FastAPI(title="guided-diffusion steering service")
    store: dict[str, _Session] = {}
    store_lock = threading.Lock()
    counter = {"next": 1}

    def _allocate_id() -> str:
        while True:
            candidate = f"s{counter['next']:04d}"
            counter["next"] += 1
            if candidate not in store:
                return candidate

    async def _json_body(request: Request):
        try:
            return await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError):
            return None

    def _get(session_id: str) -> _Session | None:
        with store_lock:
            return store.get(session_id)

    @app.post("/v1/sessions", status_code=201)
    async def create_session(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict):
            return _error(400, "schema", "", "body must be a JSON object")
        try:
            validate_config(body, "session")
        except ConfigError as err:
            return _error(400, "schema", err.path, err.message)
        schedule = schedule_from_config(body["schedule"])
        try:
            estimator = estimator_from_config(body["model"], schedule)
            config = guidance_from_config(body.get("guidance", {}))
        except (ValueError, np.linalg.LinAlgError) as err:
            return _error(400, "schema", "model", str(err))
        with store_lock:
            if "id" in body and body["id"] in store:
                return _error(409, "duplicate", "id", f"session {body['id']!r} exists")
            session_id = body["id"] if "id" in body else _allocate_id()
            session = _Session(
                id=session_id, body=body, estimator=estimator,
                schedule=schedule, config=config,
            )
            dim = estimator.dimension
            for k in range(body["particles"]):
                seed = body["seed"] + k
                session.particles.append(_Particle(
                    seed=seed,
                    z=gaussian_sample(Rng(seed), (dim,)),
                    state=GuidanceState.fresh((dim,)),
                ))
            session.created = session.updated = _now()
            session.action_log.append({"action": "create", "body": body})
            store[session_id] = session
        return session.snapshot()

    @app.get("/v1/sessions/{session_id}")
    async def get_state(session_id: str):
        session = _get(session_id)
        if session is None:
            return _error(404, "not_found", "id", f"no session {session_id!r}")
        return await run_in_threadpool(lambda: _locked(session, session.snapshot))

    @app.delete("/v1/sessions/{session_id}", status_code=204)
    async def delete_session(session_id: str):
        with store_lock:
            if session_id not in store:
                return _error(404, "not_found", "id", f"no session {session_id!r}")
            del store[session_id]
        return Response(status_code=204)

    @app.put("/v1/sessions/{session_id}/edits")
    async def update_edits(session_id: str, request: Request):
        session = _get(session_id)
        if session is None:
            return _error(404, "not_found", "id", f"no session {session_id!r}")
        body = await _json_body(request)
        if not isinstance(body, list):
            return _error(400, "schema", "edits", "body must be a JSON array of concept edits")
        concepts = []
        for i, entry in enumerate(body):
            try:
                validate_config(entry, "concept")
            except ConfigError as err:
                path = f"edits[{i}]" + (f".{err.path}" if err.path else "")
                return _error(422, "range", path, err.message)
            try:
                concepts.append(ConceptEdit(
                    condition=entry["condition"],
                    edit_scale=float(entry["edit_scale"]),
                    threshold=float(entry["threshold"]),
                    warmup=int(entry.get("warmup", 0)),
                    direction=entry.get("direction", "positive"),
                    weight=float(entry.get("weight", 1.0)),
                ))
            except ParameterError as err:
                return _error(422, "range", f"edits[{i}].{err.field}", str(err))
        def apply() -> dict:
            with session.lock:
                session.config = dataclasses.replace(
                    session.config, concepts=tuple(concepts))
                session.updated = _now()
                session.action_log.append({"action": "edits", "edits": body})
                return {"id": session.id, "t": session.t,
                        "guidance": _guidance_json(session.config)}
        return await run_in_threadpool(apply)

    @app.post("/v1/sessions/{session_id}/advance")
    async def advance(session_id: str, request: Request):
        session = _get(session_id)
        if session is None:
            return _error(404, "not_found", "id", f"no session {session_id!r}")
        body = await _json_body(request)
        if not isinstance(body, dict):
            return _error(400, "schema", "", "body must be a JSON object")
        steps = body.get("steps")
        if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
            return _error(400, "invalid", "steps", "steps must be a positive integer")
        def run() -> dict | JSONResponse:
            with session.lock:
                if session.remaining == 0:
                    return _error(409, "exhausted", "steps",
                                  f"session already at t={session.t}")
                if steps > session.remaining:
                    return _error(409, "exhausted", "steps",
                                  f"{session.remaining} steps remain, requested {steps}")
                total = session.schedule.steps
                for particle in session.particles:
                    for offset in range(steps):
                        t_sched = total - (session.t + offset)
                        z_prev = particle.z
                        particle.z, eps_bar = _step_once(
                            session.estimator, session.schedule, session.config,
                            particle.state, particle.z, t_sched)
                        particle.xhat = predict_original(
                            z_prev, eps_bar, t_sched, session.schedule)
                session.t += steps
                session.updated = _now()
                session.action_log.append({"action": "advance", "steps": steps})
                return {"id": session.id, "t": session.t,
                        "remaining": session.remaining,
                        "particles": session.positions(),
                        "stats": session.stats()}
        return await run_in_threadpool(run)

    return app


def _locked(session: _Session, fn):
    with session.lock:
        return fn()


@click.command()
@click.option("--port", type=int, default=8000, show_default=True,
              envvar="SEGA_FORGE_PORT", help="Bind port (env SEGA_FORGE_PORT).")
@click.option("--host", default="127.0.0.1", show_default=True)
def main(port: int, host: str) -> None:
    """Serve the steering API."""
    import uvicorn

    uvicorn.run(build_app(), host=host, port=port)


if __name__ == "__main__":
    main()
