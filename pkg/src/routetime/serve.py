"""Batch-inference service: request queue plus dynamic batching.

Protocol (version 1): newline-delimited JSON over a local TCP socket.

Request::

    {"v": 1, "id": "<any string>", "courier_id": "...", "t": <epoch s>,
     "history": [<package>...], "pending": [<package>...],
     "courier_profile": {...}, "weather": {...}, "holiday": false}

where a package object is ``{"package_id", "kind", "lat", "lon", "aoi",
"dispatched_time", "promised_time", "finish_time" (null while pending),
"weight", "volume"}``.

Response::

    {"v": 1, "id": ..., "model_version": "...",
     "route": [package ids in predicted completion order],
     "deliveries": [{"package_id", "route_position",
                     "predicted_finish" (epoch s, >= t)}]}

or ``{"v": 1, "id": ..., "error": "...", "retry": bool}``.  Requests are
answered exactly once.  One executor thread drains a bounded queue, forming
batches of up to ``batch_max`` requests or whatever arrived within
``flush_ms`` of the first one; a full queue rejects with ``retry: true``.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import threading
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import audit_shapes
from .dataset import Package, Sample
from .errors import RouteTimeError
from .features import encode_features
from .model import MODEL_VERSION, expected_shapes, predict_batch
from .pipeline import Artifacts, load_artifacts

PROTOCOL_VERSION = 1


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 picks an ephemeral port
    batch_max: int = 16
    flush_ms: float = 20.0
    queue_capacity: int = 256


@dataclass
class ServeCounters:
    received: int = 0
    answered: int = 0
    errors: int = 0
    rejected: int = 0
    executions: int = 0
    batched_requests: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def bump(self, name: str, by: int = 1) -> None:
        with self.lock:
            setattr(self, name, getattr(self, name) + by)


def _package_from_json(obj: dict) -> Package:
    return Package(
        id=str(obj["package_id"]), kind=obj["kind"], lat=float(obj["lat"]),
        lon=float(obj["lon"]), aoi=int(obj["aoi"]),
        dispatched_time=int(obj["dispatched_time"]),
        promised_time=int(obj["promised_time"]),
        finish_time=None if obj.get("finish_time") is None
        else int(obj["finish_time"]),
        weight=float(obj["weight"]), volume=float(obj["volume"]))


def parse_request(line: str) -> dict:
    req = json.loads(line)
    if not isinstance(req, dict):
        raise ValueError("request must be a JSON object")
    if req.get("v") != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {req.get('v')}")
    if "id" not in req:
        raise ValueError("request is missing 'id'")
    return req


def request_to_sample(req: dict) -> Sample:
    history = [_package_from_json(o) for o in req.get("history", [])]
    pending = [_package_from_json(o) for o in req.get("pending", [])]
    if not pending:
        raise ValueError("request has no pending packages")
    for pkg in history:
        if pkg.finish_time is None:
            raise ValueError(f"history package {pkg.id} has no finish_time")
    for pkg in history + pending:
        problems = pkg.validate()
        if problems:
            raise ValueError(f"package {pkg.id}: {problems[0]}")
    history = sorted(history, key=lambda p: p.finish_time)
    return Sample(courier_id=str(req.get("courier_id", "")), t=int(req["t"]),
                  history=history, pending=pending, truth_perm=None,
                  truth_offsets=None,
                  courier_profile=req.get("courier_profile", {}),
                  weather=req.get("weather", {}),
                  holiday=bool(req.get("holiday", False)))


class InferenceService:
    """Owns the model artifacts and turns request batches into responses."""

    def __init__(self, artifacts: Artifacts):
        self.artifacts = artifacts
        audit_shapes(artifacts.params, expected_shapes(artifacts.config))

    def encode(self, req: dict):
        sample = request_to_sample(req)
        cfg = self.artifacts.config
        return encode_features(sample, self.artifacts.stats, cfg.l_h, cfg.l_f,
                               self.artifacts.aoi_lats, self.artifacts.aoi_lons)

    def run_batch(self, requests: list[dict], encoded: list) -> list[dict]:
        trace = predict_batch(self.artifacts.params, self.artifacts.config,
                              encoded, self.artifacts.tensors)
        responses = []
        for b, (req, enc) in enumerate(zip(requests, encoded)):
            route = trace.sample_route(b)
            minutes = trace.sample_minutes(b)
            deliveries = []
            for position, row in enumerate(route):
                if not enc.deliv_mask[row]:
                    continue
                deliveries.append({
                    "package_id": enc.pending_ids[row],
                    "route_position": int(position),
                    "predicted_finish": int(enc.t + round(minutes[position] * 60.0)),
                })
            responses.append({
                "v": PROTOCOL_VERSION,
                "id": req["id"],
                "model_version": MODEL_VERSION,
                "route": [enc.pending_ids[row] for row in route],
                "deliveries": deliveries,
            })
        return responses


def _error_response(req_id, message: str, retry: bool = False) -> dict:
    return {"v": PROTOCOL_VERSION, "id": req_id, "error": message,
            "retry": retry}


class _Job:
    __slots__ = ("request", "encoded", "reply")

    def __init__(self, request, encoded, reply):
        self.request = request
        self.encoded = encoded
        self.reply = reply


class Server:
    """TCP front end: reader/writer threads per connection, one executor."""

    def __init__(self, service: InferenceService, config: ServeConfig):
        self.service = service
        self.config = config
        self.counters = ServeCounters()
        self.queue: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
        self._stop = threading.Event()
        self._executor = threading.Thread(target=self._executor_loop,
                                          name="model-executor", daemon=True)
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                out_q: queue.Queue = queue.Queue()

                def writer():
                    while True:
                        payload = out_q.get()
                        if payload is None:
                            return
                        try:
                            self.wfile.write(payload)
                            self.wfile.flush()
                        except OSError:
                            return

                wt = threading.Thread(target=writer, daemon=True)
                wt.start()
                try:
                    for raw in self.rfile:
                        line = raw.decode("utf-8", errors="replace").strip()
                        if not line:
                            continue
                        outer._handle_line(line, out_q)
                finally:
                    out_q.put(None)
                    wt.join(timeout=1.0)

        class ThreadingServer(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = ThreadingServer((config.host, config.port), Handler)
        self.address = self._tcp.server_address
        self._listener = threading.Thread(target=self._tcp.serve_forever,
                                          name="listener", daemon=True)

    def _handle_line(self, line: str, out_q: queue.Queue) -> None:
        self.counters.bump("received")

        def reply(obj: dict) -> None:
            if "error" in obj:
                self.counters.bump("errors")
            else:
                self.counters.bump("answered")
            out_q.put((json.dumps(obj, sort_keys=True) + "\n").encode("utf-8"))

        try:
            req = parse_request(line)
        except (json.JSONDecodeError, ValueError) as exc:
            reply(_error_response(None, f"bad request: {exc}"))
            return
        try:
            encoded = self.service.encode(req)
        except (RouteTimeError, ValueError, KeyError, TypeError) as exc:
            reply(_error_response(req["id"], f"invalid sample: {exc}"))
            return
        try:
            self.queue.put_nowait(_Job(req, encoded, reply))
        except queue.Full:
            self.counters.bump("rejected")
            reply(_error_response(req["id"],
                                  "queue full, retry after backoff", retry=True))

    def _executor_loop(self) -> None:
        import time as _time

        while not self._stop.is_set():
            try:
                first = self.queue.get(timeout=0.1)
            except queue.Empty:
                continue
            batch = [first]
            deadline = _time.monotonic() + self.config.flush_ms / 1000.0
            while len(batch) < self.config.batch_max:
                remaining = deadline - _time.monotonic()
                if remaining <= 0:
                    break
                try:
                    batch.append(self.queue.get(timeout=remaining))
                except queue.Empty:
                    break
            self.counters.bump("executions")
            self.counters.bump("batched_requests", len(batch))
            try:
                responses = self.service.run_batch(
                    [job.request for job in batch],
                    [job.encoded for job in batch])
            except RouteTimeError as exc:
                for job in batch:
                    job.reply(_error_response(job.request["id"],
                                              f"inference failed: {exc}"))
                continue
            for job, response in zip(batch, responses):
                job.reply(response)

    def start(self) -> None:
        self._executor.start()
        self._listener.start()

    def stop(self) -> None:
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        self._executor.join(timeout=2.0)


def serve_forever(artifact_dir, config: ServeConfig) -> None:
    """CLI entry: load artifacts, start, and block until interrupted."""
    server = Server(InferenceService(load_artifacts(artifact_dir)), config)
    server.start()
    host, port = server.address
    print(f"serving on {host}:{port} "
          f"(batch_max={config.batch_max}, flush_ms={config.flush_ms})")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
