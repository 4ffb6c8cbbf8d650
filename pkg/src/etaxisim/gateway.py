"""HTTP/WebSocket control service around live simulation runs.

Each run owns one Simulation on a dedicated pacing thread that advances
virtual time at `pace` virtual seconds per real second (default 60).
A serialized command queue is the only inbound channel: commands are stamped
with the current virtual time when no explicit time is given ("now"), logged,
and applied at the next event boundary, so any live session can be replayed
headlessly from its exported log alone.

Endpoints:
  POST /runs {"config": {...}, "pace": 60}  -> {"run_id": ...}
  POST /runs/{id}/commands {kind, args, t?} -> {"commands": [recorded...]}
  GET  /runs/{id}/snapshot                  -> SimSnapshot JSON
  GET  /runs/{id}/log                       -> replayable log
  WS   /runs/{id}/stream                    -> {"kind": "snapshot"|"jam"|
                                                "prompt"|"command_applied",
                                                "payload": {...}}

Pause/Resume stop and restart the pacing clock; StepUntil advances the run
synchronously to a virtual time. All three are recorded like any other
command (replay ignores them: a replayer picks its own end time).
"""

from __future__ import annotations

import asyncio
import itertools
import queue
import threading
import time
from contextlib import asynccontextmanager

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .errors import CommandError, ConfigError
from .scenario import ScenarioConfig
from .simulation import Simulation

_TICK_S = 0.05


class RunSession:
    """One live run: simulation, pacing thread, subscriber fan-out."""

    def __init__(self, run_id: str, config: ScenarioConfig,
                 pace: float = 60.0):
        self.id = run_id
        self.config = config
        self.pace = float(pace)
        self.outbox: list = []
        self.sim = Simulation(config, outbox=self.outbox)
        self.lock = threading.RLock()
        self.paused = True
        self.subscribers: list[queue.Queue] = []
        self._stop = False
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name=f"run-{run_id}")
        self._thread.start()

    # --- pacing -----------------------------------------------------------

    def _loop(self):
        while not self._stop:
            time.sleep(_TICK_S)
            with self.lock:
                if self._stop:
                    return
                if not self.paused:
                    now = self.sim.engine.now
                    horizon = self.config.horizon_s
                    if now < horizon:
                        self.sim.engine.run_until(
                            min(now + self.pace * _TICK_S, horizon))
                    else:
                        self.paused = True
                self._fanout()

    def close(self):
        with self.lock:
            self._stop = True

    # --- commands ---------------------------------------------------------

    def submit(self, commands: list) -> list:
        """Stamp "now" commands, record, apply session-level semantics."""
        with self.lock:
            stamped = []
            for raw in commands:
                raw = dict(raw)
                if raw.get("t") in (None, "now"):
                    raw["t"] = self.sim.engine.now
                stamped.append(raw)
            recorded = self.sim.submit_commands(stamped)
            for cmd in recorded:
                if cmd["kind"] == "Pause":
                    self.paused = True
                elif cmd["kind"] == "Resume":
                    self.paused = False
                elif cmd["kind"] == "StepUntil":
                    target = float(cmd["args"].get("until", -1.0))
                    if target < self.sim.engine.now:
                        raise CommandError(
                            f"StepUntil target {target} is in the past")
                    self.sim.engine.run_until(target)
            self._fanout()
            return recorded

    # --- outbound ---------------------------------------------------------

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self.lock:
            q.put({"kind": "snapshot",
                   "payload": {"t": self.sim.engine.now,
                               "snapshot": self.sim.snapshot().to_dict()}})
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue):
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def _fanout(self):
        if not self.outbox:
            return
        items = list(self.outbox)
        del self.outbox[:]
        messages = [{"kind": it["kind"],
                     "payload": {k: v for k, v in it.items() if k != "kind"}}
                    for it in items]
        for q in self.subscribers:
            for m in messages:
                q.put(m)

    # --- reads ------------------------------------------------------------

    def snapshot_dict(self) -> dict:
        with self.lock:
            return self.sim.snapshot().to_dict()

    def log_dict(self) -> dict:
        with self.lock:
            return {
                "run_id": self.id,
                "seed": self.sim.seed,
                "virtual_time": self.sim.engine.now,
                "config": self.config.to_dict(),
                "commands": [dict(c) for c in self.sim.command_log],
            }


def replay_log(log: dict) -> Simulation:
    """Headless rerun of an exported session log; returns the finished sim."""
    cfg = ScenarioConfig.from_dict(log["config"])
    sim = Simulation(cfg)
    if log.get("commands"):
        sim.submit_commands(log["commands"])
    sim.run_until(float(log["virtual_time"]))
    return sim


def create_app() -> FastAPI:
    sessions: dict[str, RunSession] = {}
    ids = itertools.count(1)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for s in sessions.values():
            s.close()

    app = FastAPI(title="etaxisim gateway", lifespan=lifespan)
    app.state.sessions = sessions

    def _not_found(run_id: str) -> JSONResponse:
        return JSONResponse({"error": "not_found", "run_id": run_id},
                            status_code=404)

    @app.post("/runs")
    async def create_run(body: dict):
        try:
            cfg = ScenarioConfig.from_dict(body.get("config", body) or {})
        except (ConfigError, TypeError) as exc:
            return JSONResponse({"error": "config", "reason": str(exc)},
                                status_code=400)
        pace = float(body.get("pace", 60.0)) if isinstance(body, dict) else 60.0
        run_id = f"r{next(ids)}"
        sessions[run_id] = RunSession(run_id, cfg, pace=pace)
        return {"run_id": run_id, "paused": True,
                "horizon_s": cfg.horizon_s}

    @app.post("/runs/{run_id}/commands")
    async def post_commands(run_id: str, body: dict):
        session = sessions.get(run_id)
        if session is None:
            return _not_found(run_id)
        commands = body.get("commands") if "commands" in body else [body]
        if not isinstance(commands, list):
            return JSONResponse(
                {"error": "command", "reason": "commands must be a list"},
                status_code=400)
        try:
            recorded = await asyncio.to_thread(session.submit, commands)
        except CommandError as exc:
            return JSONResponse({"error": "command", "reason": str(exc)},
                                status_code=400)
        return {"commands": recorded}

    @app.get("/runs/{run_id}/snapshot")
    async def get_snapshot(run_id: str):
        session = sessions.get(run_id)
        if session is None:
            return _not_found(run_id)
        return await asyncio.to_thread(session.snapshot_dict)

    @app.get("/runs/{run_id}/log")
    async def get_log(run_id: str):
        session = sessions.get(run_id)
        if session is None:
            return _not_found(run_id)
        return await asyncio.to_thread(session.log_dict)

    @app.get("/runs/{run_id}/map")
    async def get_map(run_id: str):
        # static geometry for map clients; live state (jams, station queues)
        # ships with every snapshot instead
        session = sessions.get(run_id)
        if session is None:
            return _not_found(run_id)
        net = session.sim.net
        return {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in net.nodes],
            "segments": [{"id": s.id, "from": s.from_node, "to": s.to_node,
                          "length_m": s.length_m} for s in net.segments],
            "stops": sorted(net.stops),
            "rental_sites": list(net.rental_sites),
        }

    @app.websocket("/runs/{run_id}/stream")
    async def stream(ws: WebSocket, run_id: str):
        session = sessions.get(run_id)
        if session is None:
            await ws.close(code=1008)
            return
        await ws.accept()
        q = session.subscribe()
        try:
            while True:
                try:
                    item = q.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.02)
                    continue
                await ws.send_json(item)
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(q)

    return app
