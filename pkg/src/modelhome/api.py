"""HTTP face of the host: JSON snapshots, control endpoints, event stream.

Handlers never touch the models. Reads serve the snapshot published between
ticks; writes validate against that snapshot, then enqueue a control message
for the tick loop. The one exception is rule upload, which parses and
type-checks the candidate document in the handler (metamodels are immutable,
so that is safe off-loop) and only enqueues the swap.
"""

from __future__ import annotations

import json
import time

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse

from . import mapping
from .host import Host
from .xmldoc import XmlMalformed

STREAM_POLL_S = 0.05


def _error(status: int, message: str, diagnostics: list | None = None) -> JSONResponse:
    body = {"error": message}
    if diagnostics is not None:
        body["diagnostics"] = diagnostics
    return JSONResponse(body, status_code=status)


def build_app(host: Host) -> FastAPI:
    app = FastAPI(title="modelhome", docs_url=None, redoc_url=None)

    @app.get("/api/scenario")
    def get_scenario():
        snap = host.snapshot()
        return {
            "tick": snap["tick"],
            "time_hours": snap["time_hours"],
            "rules_version": snap["rules_version"],
            "model": snap["scenario"],
            "machine_states": snap["machine_states"],
            "rule_branches": snap["rule_branches"],
        }

    @app.get("/api/runtime")
    def get_runtime():
        snap = host.snapshot()
        return {
            "tick": snap["tick"],
            "time_hours": snap["time_hours"],
            "model": snap["runtime"],
            "online": snap["online"],
        }

    @app.get("/api/notifications")
    def get_notifications(since: int = 0):
        snap = host.snapshot()
        notes = [n for n in snap["notifications"] if n["seq"] >= since]
        return {"tick": snap["tick"], "notifications": notes}

    @app.get("/api/diagnostics")
    def get_diagnostics():
        snap = host.snapshot()
        return {"tick": snap["tick"], "diagnostics": snap["diagnostics"]}

    @app.get("/api/status")
    def get_status():
        snap = host.snapshot()
        return {k: snap[k] for k in (
            "tick", "time_hours", "rules_version", "online", "test_mode",
        )}

    @app.post("/api/plant/name")
    async def set_plant_name(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(422, "body must be JSON")
        name = body.get("name") if isinstance(body, dict) else None
        if not isinstance(name, str):
            return _error(422, 'body must be {"name": "<plant name>"}')
        scenario = host.snapshot()["scenario"]
        if not any(e["class"] == "Recognizer" for e in scenario["elements"].values()):
            return _error(409, "scenario has no Recognizer element")
        host.enqueue(("plant_name", name))
        return {"accepted": True, "name": name}

    @app.post("/api/actuator/{element_id}")
    async def set_actuator(element_id: str, request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(422, "body must be JSON")
        value = body.get("on") if isinstance(body, dict) else None
        if not isinstance(value, bool):
            return _error(422, 'body must be {"on": true|false}')
        scenario = host.snapshot()["scenario"]
        element = scenario["elements"].get(element_id)
        if element is None:
            return _error(404, f"no scenario element {element_id!r}")
        if "on" not in element["attrs"]:
            return _error(422, f"{element_id} ({element['class']}) has no 'on' attribute")
        host.enqueue(("actuator", element_id, "on", value))
        return {"accepted": True, "element": element_id, "on": value}

    @app.put("/api/rules")
    async def put_rules(request: Request):
        text = (await request.body()).decode("utf-8", errors="replace")
        try:
            ruleset = mapping.parse_rules(text)
        except XmlMalformed as exc:
            return _error(409, "mapping document is not well-formed XML", [
                {"where": "mapping", "message": exc.message,
                 "line": exc.line, "col": exc.col, "rule_id": None, "element_id": None},
            ])
        except mapping.MappingParseError as exc:
            return _error(409, "mapping document failed to parse",
                          [exc.diagnostic.to_json()])
        problems = mapping.validate_rules(
            ruleset, host.runtime_model.registry, host.scenario_model.registry
        )
        if problems:
            return _error(409, "mapping rules failed validation",
                          [p.to_json() for p in problems])
        changed, version = host.allocate_rules_version(text)
        if not changed:
            return {"changed": False, "version": host.sync.ruleset.version}
        host.enqueue(("rules", ruleset.with_version(version)))
        return {"changed": True, "version": version}

    @app.post("/api/tick")
    def post_tick(count: int = 1):
        if not host.config.test_mode:
            return _error(403, "manual ticking requires test mode")
        count = max(1, min(count, 10_000))
        for _ in range(count):
            host.tick()
        snap = host.snapshot()
        return {"tick": snap["tick"], "time_hours": snap["time_hours"]}

    @app.get("/api/events")
    def get_events(since: int = 0, limit: int | None = None,
                   max_wait: float | None = None):
        def stream():
            last = since
            sent = 0
            deadline = None if max_wait is None else time.monotonic() + max_wait
            while True:
                for entry in host.journal_since(last):
                    last = entry["seq"]
                    yield (f"id: {entry['seq']}\n"
                           f"event: {entry['type']}\n"
                           f"data: {json.dumps(entry)}\n\n")
                    sent += 1
                    if limit is not None and sent >= limit:
                        return
                if deadline is not None and time.monotonic() >= deadline:
                    return
                time.sleep(STREAM_POLL_S)

        return StreamingResponse(stream(), media_type="text/event-stream")

    if host.config.frontend_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount(
            "/", StaticFiles(directory=host.config.frontend_dir, html=True), name="console"
        )
    else:
        @app.get("/")
        def index():
            return Response(
                "modelhome host is running; API under /api/", media_type="text/plain"
            )

    return app
