"""HTTP front ends for the balancer and the emulated edge servers.

Both sides use the standard library's threading HTTP server. The balancer
talks to edge servers through :class:`HttpBackend`, which speaks the same
protocol the clients use plus the ``X-Bucket`` / ``X-Epoch`` headers.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping
from urllib.parse import urlsplit

from deduplicator.edge import EdgeServer, ReuseCacheEntry
from deduplicator.errors import BackendTimeout, InputError, RegistrationRequired
from deduplicator.lsh import signature_from_hex, signature_to_hex
from deduplicator.messages import (
    H_BUCKET,
    H_EPOCH,
    H_SERVED_BY,
    TaskRequest,
    TaskResponse,
    encode_payload,
    header,
    parse_request,
    parse_response,
    request_headers,
    response_body,
    response_headers,
)
from deduplicator.proxy import Deduplicator
from deduplicator.stats import StatsReport

log = logging.getLogger(__name__)

_MAX_BODY = 64 * 1024 * 1024


def _split_address(address: str) -> tuple[str, int]:
    parts = urlsplit(address if "//" in address else f"http://{address}")
    if not parts.hostname or not parts.port:
        raise InputError(f"address {address!r} needs host and port")
    return parts.hostname, parts.port


def post_json(address: str, path: str, doc, timeout: float = 5.0) -> tuple[int, dict | list | None]:
    host, port = _split_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        body = json.dumps(doc).encode()
        conn.request("POST", path, body, {"Content-Type": "application/json"})
        resp = conn.getresponse()
        data = resp.read()
        return resp.status, json.loads(data) if data else None
    finally:
        conn.close()


def get_json(address: str, path: str, timeout: float = 5.0):
    host, port = _split_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("GET", path)
        resp = conn.getresponse()
        return resp.status, json.loads(resp.read() or b"null")
    finally:
        conn.close()


class HttpBackend:
    """Edge server reached over HTTP."""

    def __init__(self, server_id: str, address: str, bits: int, timeout: float = 2.0):
        self.server_id = server_id
        self.address = address
        self.bits = bits
        self.timeout = timeout
        self.host, self.port = _split_address(address)

    def submit(self, req: TaskRequest, bucket: int, epoch: int) -> TaskResponse:
        headers = request_headers(req, self.bits)
        headers[H_BUCKET] = signature_to_hex(bucket, self.bits)
        headers[H_EPOCH] = str(epoch)
        headers["Content-Type"] = "application/json"
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.request("POST", f"/svc/{req.service}", encode_payload(req.payload), headers)
            resp = conn.getresponse()
            body = resp.read()
            return parse_response(resp.status, dict(resp.getheaders()), body)
        except (socket.timeout, TimeoutError) as exc:
            raise BackendTimeout(f"{self.server_id} did not answer within {self.timeout}s") from exc
        except (http.client.HTTPException, OSError) as exc:
            raise ConnectionError(f"{self.server_id}: {exc}") from exc
        finally:
            conn.close()

    def migrate(self, lo: int, hi: int, target: "HttpBackend") -> int:
        try:
            status, doc = post_json(
                self.address, "/migrate", {"lo": lo, "hi": hi, "to_address": target.address}, self.timeout * 5
            )
        except (socket.timeout, TimeoutError) as exc:
            raise BackendTimeout(str(exc)) from exc
        except (http.client.HTTPException, OSError) as exc:
            raise ConnectionError(str(exc)) from exc
        if status != 200:
            raise ConnectionError(f"migration from {self.server_id} failed with {status}: {doc}")
        return int(doc.get("moved", 0))


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "deduplicator"

    def log_message(self, fmt, *args):  # route access logs through logging
        log.debug("%s %s", self.address_string(), fmt % args)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length > _MAX_BODY:
            raise InputError("request body too large")
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, body: bytes, headers: Mapping[str, str] | None = None) -> None:
        self.send_response(status)
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        if not headers or "Content-Type" not in headers:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, doc) -> None:
        self._send(status, json.dumps(doc).encode())

    def _read_json(self):
        try:
            return json.loads(self._body() or b"null")
        except ValueError as exc:
            raise InputError(f"body is not JSON: {exc}") from None


class ProxyHandler(_Handler):
    server: "ProxyHttpServer"

    def do_POST(self):
        dedup = self.server.dedup
        path = self.path.split("?", 1)[0]
        try:
            if path.startswith("/svc/"):
                service = path[len("/svc/"):]
                resp = dedup.handle_raw(service, dict(self.headers.items()), self._body())
                headers = response_headers(resp)
                if resp.server:
                    headers[H_SERVED_BY] = resp.server
                self._send(resp.status, response_body(resp), headers)
            elif path == "/register":
                doc = self._read_json()
                backend = HttpBackend(str(doc["server"]), str(doc["address"]), dedup.config.bits,
                                      dedup.config.response_timeout)
                dedup.handle_register(backend)
                self._json(200, {"epoch": dedup.table.epoch})
            elif path == "/stats":
                dedup.ingest_notification(StatsReport.from_json(self._read_json()))
                self._json(200, {"ok": True})
            else:
                self._json(404, {"error": f"no route {path}"})
        except RegistrationRequired as exc:
            self._json(404, {"error": str(exc)})
        except (InputError, KeyError, TypeError) as exc:
            self._json(400, {"error": str(exc)})

    def do_GET(self):
        if self.path.split("?", 1)[0] == "/metrics":
            self._json(200, self.server.dedup.admin_metrics())
        else:
            self._json(404, {"error": f"no route {self.path}"})


class ProxyHttpServer(ThreadingHTTPServer):
    """Serves a :class:`Deduplicator` and runs its control path on a background thread."""

    daemon_threads = True

    def __init__(self, address: tuple[str, int], dedup: Deduplicator, tick: float | None = None):
        super().__init__(address, ProxyHandler)
        self.dedup = dedup
        self.tick = tick if tick is not None else min(0.5, dedup.config.notification_interval / 2)
        self._stop = threading.Event()
        self._control = threading.Thread(target=self._control_loop, name="dedup-control", daemon=True)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def _control_loop(self) -> None:
        while not self._stop.wait(self.tick):
            try:
                self.dedup.control_tick()
            except Exception:
                log.exception("control tick failed")

    def start(self) -> threading.Thread:
        self._control.start()
        t = threading.Thread(target=self.serve_forever, name="dedup-http", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()
        self.shutdown()
        self.server_close()


class EdgeHandler(_Handler):
    server: "EdgeHttpServer"

    def do_POST(self):
        edge = self.server.edge
        path = self.path.split("?", 1)[0]
        try:
            if path.startswith("/svc/"):
                if edge.failed:
                    # a crashed server just drops the connection
                    self.close_connection = True
                    self.connection.shutdown(socket.SHUT_RDWR)
                    return
                service = path[len("/svc/"):]
                req = parse_request(service, dict(self.headers.items()), self._body(), edge.dim, edge.bits)
                raw = header(dict(self.headers.items()), H_BUCKET)
                bucket = signature_from_hex(raw, edge.bits) if raw else None
                resp = edge.handle_task(req, bucket)
                self._send(resp.status, response_body(resp), response_headers(resp))
            elif path == "/migrate":
                self._migrate(self._read_json())
            elif path == "/control/fail":
                doc = self._read_json() or {}
                edge.set_failed(bool(doc.get("failed", True)))
                self._json(200, {"failed": edge.failed})
            else:
                self._json(404, {"error": f"no route {path}"})
        except (InputError, KeyError, TypeError, ValueError) as exc:
            self._json(400, {"error": str(exc)})

    def _migrate(self, doc) -> None:
        edge = self.server.edge
        if isinstance(doc, list):
            if edge.failed:
                self._json(503, {"error": "server is down"})
                return
            entries = [ReuseCacheEntry.from_json(e, edge.bits) for e in doc]
            self._json(200, {"received": edge.receive_entries(entries)})
            return
        lo, hi, to = int(doc["lo"]), int(doc["hi"]), str(doc["to_address"])

        def send(entries: list[ReuseCacheEntry]) -> int:
            status, reply = post_json(to, "/migrate", [e.to_json(edge.bits) for e in entries])
            if status != 200:
                raise ConnectionError(f"receiver answered {status}")
            return int(reply.get("received", 0))

        try:
            moved = edge.migrate_entries(lo, hi, send)
        except (ConnectionError, OSError, TimeoutError) as exc:
            self._json(502, {"error": str(exc)})
            return
        self._json(200, {"moved": moved})

    def do_GET(self):
        if self.path.split("?", 1)[0] == "/cache/stats":
            self._json(200, self.server.edge.cache_stats())
        else:
            self._json(404, {"error": f"no route {self.path}"})


class EdgeHttpServer(ThreadingHTTPServer):
    """Serves one :class:`EdgeServer`; optionally registers with a balancer and reports to it."""

    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        edge: EdgeServer,
        proxy_address: str | None = None,
        report_interval: float = 1.0,
        advertise: str | None = None,
    ):
        super().__init__(address, EdgeHandler)
        self.edge = edge
        self.proxy_address = proxy_address
        self.report_interval = report_interval
        self.advertise = advertise
        self._stop = threading.Event()

    @property
    def address(self) -> str:
        if self.advertise:
            return self.advertise
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def register(self, retries: int = 20, delay: float = 0.25) -> None:
        doc = {"server": self.edge.server_id, "address": self.address}
        for attempt in range(retries):
            try:
                status, reply = post_json(self.proxy_address, "/register", doc)
            except OSError:
                time.sleep(delay)
                continue
            if status != 200:
                raise InputError(f"registration refused: {reply}")
            return
        raise ConnectionError(f"could not reach balancer at {self.proxy_address}")

    def _report_loop(self) -> None:
        while not self._stop.wait(self.report_interval):
            if self.edge.failed:
                continue
            try:
                post_json(self.proxy_address, "/stats", self.edge.report_stats().to_json())
            except OSError as exc:
                log.warning("stats report failed: %s", exc)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name=f"edge-{self.edge.server_id}", daemon=True)
        t.start()
        if self.proxy_address:
            self.register()
            threading.Thread(target=self._report_loop, name="edge-report", daemon=True).start()
        return t

    def stop(self) -> None:
        self._stop.set()
        self.shutdown()
        self.server_close()
