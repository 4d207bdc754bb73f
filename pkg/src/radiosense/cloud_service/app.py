"""HTTP and WebSocket front end of the cloud service.

Paths use forward slashes (``/api/post_CQIfeatures`` etc.).  Registry
mutations are serialized through one asyncio lock; WebSocket fan-out uses
bounded per-subscriber queues so a slow subscriber never blocks inference.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import anyio
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, Response

from ..cqi_core import TaskType
from ..inference import NoEvidenceError
from ..wire import WireError, parse_feature_message
from .catalog import CATALOG_SCHEMA, build_catalog, catalog_schema
from .registry import PRIVATE, PUBLIC, RegistryError, TaskEntry, TaskRegistry

log = logging.getLogger(__name__)

POLICY_VIOLATION = 1008
TRY_AGAIN_LATER = 1013


@dataclass
class CloudConfig:
    private_token: str | None = None
    history_size: int = 1024
    journal: str | None = None
    snapshot_every: int = 100
    subscriber_backlog: int = 256

    @classmethod
    def from_json(cls, obj: dict) -> "CloudConfig":
        known = {k: obj[k] for k in ("private_token", "history_size", "journal", "snapshot_every", "subscriber_backlog") if k in obj}
        return cls(**known)

    @classmethod
    def load(cls, path: str | Path | None) -> "CloudConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"cloud config not found: {p}")
        return cls.from_json(json.loads(p.read_text(encoding="utf-8")))


@dataclass(eq=False)
class Subscriber:
    task_type: str
    gw_id: str | None
    task_id: str | None
    authorized: bool
    queue: asyncio.Queue
    overflowed: bool = False

    def wants(self, entry: TaskEntry) -> bool:
        if entry.task.task_type.value != self.task_type:
            return False
        if self.task_id is not None and entry.task.task_id != self.task_id:
            return False
        if self.gw_id is not None and self.gw_id not in entry.gw_ids:
            return False
        return self.authorized or entry.profile == PUBLIC


@dataclass
class Hub:
    backlog: int = 256
    subscribers: set = field(default_factory=set)

    def add(self, sub: Subscriber) -> None:
        self.subscribers.add(sub)

    def remove(self, sub: Subscriber) -> None:
        self.subscribers.discard(sub)

    def publish(self, entry: TaskEntry, payload: str) -> None:
        for sub in list(self.subscribers):
            if not sub.wants(entry):
                continue
            try:
                sub.queue.put_nowait(payload)
            except asyncio.QueueFull:
                # drop the slow consumer: clear its backlog and leave a close marker
                sub.overflowed = True
                while not sub.queue.empty():
                    sub.queue.get_nowait()
                sub.queue.put_nowait(None)
                self.subscribers.discard(sub)


def _error(status: int, message: str, path: str | None = None) -> JSONResponse:
    body = {"error": message}
    if path:
        body["path"] = path
    return JSONResponse(body, status_code=status)


def _bearer(headers) -> str | None:
    auth = headers.get("authorization", "")
    if auth.lower().startswith("bearer "):
        return auth[7:].strip()
    return None


async def _json_body(request: Request):
    try:
        return json.loads(await request.body() or b"null")
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise RegistryError(400, "body: invalid JSON") from None


def create_app(config: CloudConfig | None = None, journal: str | Path | None = None) -> FastAPI:
    config = config or CloudConfig()
    journal = journal or config.journal
    registry = TaskRegistry(journal, history_size=config.history_size, snapshot_every=config.snapshot_every)
    hub = Hub(config.subscriber_backlog)
    lock = asyncio.Lock()
    app = FastAPI(title="radiosense cloud", docs_url=None, redoc_url=None)
    app.state.registry = registry
    app.state.hub = hub
    app.state.config = config

    def authorized(token: str | None) -> bool:
        return config.private_token is not None and token == config.private_token

    def check_type(task_type: str) -> None:
        if task_type not in {t.value for t in TaskType}:
            raise RegistryError(404, f"unknown task type {task_type!r}")

    def check_access(entry: TaskEntry, request: Request) -> None:
        if entry.profile == PRIVATE and not authorized(_bearer(request.headers)):
            raise RegistryError(401, f"task {entry.task.task_id!r} requires a bearer token")

    @app.exception_handler(RegistryError)
    async def _registry_error(request: Request, exc: RegistryError):
        return _error(exc.status, exc.message)

    @app.exception_handler(WireError)
    async def _wire_error(request: Request, exc: WireError):
        return _error(400, str(exc), exc.path)

    @app.get("/api/health")
    async def health():
        return {"ok": True, "tasks": len(registry.tasks)}

    @app.post("/api/post_CQIfeatures", status_code=202)
    async def post_features(request: Request):
        obj = await _json_body(request)
        task_id = obj.get("task_id") if isinstance(obj, dict) else None
        entry = registry.tasks.get(task_id) if isinstance(task_id, str) else None
        if entry is None:
            parse_feature_message(obj)  # schema errors first, then unknown task
            raise RegistryError(404, f"unknown task {task_id!r}")
        check_access(entry, request)
        gw_id = obj.get("gw_id")
        if isinstance(gw_id, str) and gw_id not in entry.gw_ids:
            raise RegistryError(403, f"gateway {gw_id!r} is not assigned to task {task_id!r}")
        msg = parse_feature_message(obj, entry.expected_P())
        async with lock:
            try:
                est, seq = registry.ingest(msg)
            except (ValueError, KeyError) as exc:
                if isinstance(exc, (WireError, NoEvidenceError)):
                    raise
                raise RegistryError(400, f"devices: {exc}") from None
            hub.publish(entry, json.dumps(est.to_json()))
        return JSONResponse({"accepted": True, "seq": seq}, status_code=202)

    @app.exception_handler(NoEvidenceError)
    async def _no_evidence(request: Request, exc: NoEvidenceError):
        return _error(422, str(exc))

    def _select(task_type: str, gw: str | None, task_id: str | None, request: Request) -> TaskEntry:
        check_type(task_type)
        if task_id is not None:
            entry = registry.get(task_id)
            if entry.task.task_type.value != task_type or (gw is not None and gw not in entry.gw_ids):
                raise RegistryError(404, f"task {task_id!r} is not a {task_type} task on gateway {gw!r}")
            check_access(entry, request)
            return entry
        matches = [
            e
            for _, e in sorted(registry.tasks.items())
            if e.task.task_type.value == task_type and (gw is None or gw in e.gw_ids)
        ]
        if not matches:
            raise RegistryError(404, f"no {task_type} task for gateway {gw!r}")
        ok = authorized(_bearer(request.headers))
        visible = [e for e in matches if ok or e.profile == PUBLIC]
        if not visible:
            raise RegistryError(401, "matching tasks require a bearer token")
        return visible[0]

    @app.get("/api/{task_type}/get_LatentValues")
    async def get_latent(task_type: str, request: Request, GW: str | None = None, task_id: str | None = None, history: int | None = None):
        entry = _select(task_type, GW, task_id, request)
        if not entry.history:
            return Response(status_code=204)
        if history is not None:
            if history < 1:
                raise RegistryError(400, "history: expected a positive integer")
            items = list(entry.history)[-history:]
            return JSONResponse([e.to_json() for e in items])
        return JSONResponse(entry.history[-1].to_json())

    @app.post("/api/{task_type}/start_task", status_code=201)
    async def start_task(task_type: str, request: Request, GW: str | None = None):
        check_type(task_type)
        body = await _json_body(request)
        if not isinstance(body, dict):
            raise RegistryError(400, "body: expected JSON object")
        task_obj = body["task"] if "task" in body else body
        if not isinstance(task_obj, dict):
            raise RegistryError(400, "task: expected JSON object")
        if task_obj.get("task_type") != task_type:
            raise RegistryError(400, f"task.task_type: expected {task_type!r}")
        profile = body.get("profile", PUBLIC) if "task" in body else PUBLIC
        if profile == PRIVATE and not authorized(_bearer(request.headers)):
            raise RegistryError(401, "private tasks require a bearer token")
        existing = registry.tasks.get(task_obj.get("task_id"))
        if existing is not None:
            check_access(existing, request)
        async with lock:
            entry, created = registry.start_task(task_obj, GW, profile, body.get("model"), body.get("knn"))
        return JSONResponse({**entry.public_json(), "created": created}, status_code=201)

    @app.post("/api/{task_type}/stop_task")
    async def stop_task(task_type: str, request: Request, task_id: str, GW: str | None = None):
        check_type(task_type)
        entry = registry.get(task_id)
        check_access(entry, request)
        async with lock:
            registry.stop_task(task_id, GW)
        return {"task_id": task_id, "removed": task_id not in registry.tasks}

    @app.post("/api/{task_type}/upload_model")
    async def upload_model(task_type: str, request: Request, task_id: str):
        check_type(task_type)
        entry = registry.get(task_id)
        check_access(entry, request)
        body = await _json_body(request)
        if not isinstance(body, dict):
            raise RegistryError(400, "body: expected JSON object")
        async with lock:
            entry = registry.upload_model(task_id, body.get("model"), body.get("knn"))
        return {"task_id": task_id, "model_version": entry.model_version}

    @app.post("/api/register_gateway", status_code=201)
    async def register_gateway(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict):
            raise RegistryError(400, "body: expected JSON object")
        async with lock:
            info = registry.register_gateway(body)
        return JSONResponse(info.to_json(), status_code=201)

    @app.get("/api/{task_type}/CQI_feature")
    async def cqi_feature(task_type: str, request: Request, GW: str = ""):
        check_type(task_type)
        ok = authorized(_bearer(request.headers))
        tasks = []
        for e in registry.active_for(GW, task_type, ok):
            tasks.append({**e.task.to_json(), "profile": e.profile, "model_version": e.model_version, "has_model": e.has_model})
        return {"gw_id": GW, "active_tasks": tasks}

    @app.get("/api/catalog")
    async def catalog(request: Request):
        return build_catalog(registry, authorized(_bearer(request.headers)))

    @app.get("/api/catalog/schema")
    async def schema(request: Request):
        return catalog_schema(authorized(_bearer(request.headers)))

    @app.websocket("/api/{task_type}/subscribe")
    async def subscribe(websocket: WebSocket, task_type: str, GW: str | None = None, task_id: str | None = None, token: str | None = None):
        token = token or _bearer(websocket.headers)
        ok = authorized(token)
        await websocket.accept()
        if task_type not in {t.value for t in TaskType}:
            await websocket.close(code=POLICY_VIOLATION, reason="unknown task type")
            return
        if task_id is not None:
            entry = registry.tasks.get(task_id)
            if entry is not None and entry.profile == PRIVATE and not ok:
                await websocket.close(code=POLICY_VIOLATION, reason="unauthorized")
                return
        elif not ok and any(
            e.profile == PRIVATE and e.task.task_type.value == task_type and (GW is None or GW in e.gw_ids)
            for e in registry.tasks.values()
        ) and not any(
            e.profile == PUBLIC and e.task.task_type.value == task_type and (GW is None or GW in e.gw_ids)
            for e in registry.tasks.values()
        ):
            await websocket.close(code=POLICY_VIOLATION, reason="unauthorized")
            return
        sub = Subscriber(task_type, GW, task_id, ok, asyncio.Queue(maxsize=hub.backlog))
        hub.add(sub)

        async def pump(scope: anyio.CancelScope):
            while True:
                payload = await sub.queue.get()
                if payload is None:
                    await websocket.close(code=TRY_AGAIN_LATER, reason="subscriber backlog exceeded")
                    break
                await websocket.send_text(payload)
            scope.cancel()

        async def drain(scope: anyio.CancelScope):
            # notices client disconnects while no estimates flow
            try:
                while True:
                    await websocket.receive_text()
            except WebSocketDisconnect:
                pass
            scope.cancel()

        try:
            async with anyio.create_task_group() as tg:
                tg.start_soon(pump, tg.cancel_scope)
                tg.start_soon(drain, tg.cancel_scope)
        finally:
            hub.remove(sub)

    return app


def serve(config: CloudConfig | None = None, host: str = "127.0.0.1", port: int = 8080, journal: str | None = None) -> None:
    import uvicorn

    app = create_app(config, journal)
    uvicorn.run(app, host=host, port=port, log_level="warning", ws="websockets-sansio")


__all__ = ["CloudConfig", "create_app", "serve", "CATALOG_SCHEMA"]
