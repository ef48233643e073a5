"""Prediction server and the matching remote oracle client."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import stack_oracles
from .checkpoint import load_checkpoint
from .extraction import ModelOracle, OracleError, PredictionOracle
from .nn import Model
from .protocol import ProtocolError, decode_request, decode_response, encode_error, encode_request, encode_response

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    checkpoint: str | None = None
    wrappers: list[dict] = field(default_factory=list)
    max_connections: int = 16
    query_limit: int | None = None


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: PredictionServer = self.server
        if not srv.slots.acquire(blocking=False):
            self.wfile.write(encode_error(None, "busy"))
            return
        try:
            # a fresh stack per connection: stochastic wrappers restart from their
            # configured seeds, so one client's traffic never shifts another's draws
            srv.next_connection()
            oracle = stack_oracles(ModelOracle(srv.model), srv.config.wrappers)
            for line in self.rfile:
                if not line.strip():
                    continue
                self.wfile.write(self._answer(line, oracle, srv))
        finally:
            srv.slots.release()

    @staticmethod
    def _answer(line, oracle, srv) -> bytes:
        try:
            id, x = decode_request(line)
        except ProtocolError as exc:
            return encode_error(exc.id, exc.kind)
        if x.size != srv.model.config.input_dim:
            return encode_error(id, "shape")
        if srv.config.query_limit is not None and oracle.queries >= srv.config.query_limit:
            return encode_error(id, "limit")
        if not np.all(np.isfinite(x)):
            return encode_error(id, "non-finite")
        probs = oracle.query(x.reshape(srv.model.input_shape))
        srv.count()
        return encode_response(id, probs)


class PredictionServer(socketserver.ThreadingTCPServer):
    """Serves one immutable model; ``serve(config)`` is the usual entry point."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: ServerConfig, model: Model):
        self.config = config
        self.model = model
        for arr in model.params.values():
            arr.setflags(write=False)
        self.slots = threading.BoundedSemaphore(config.max_connections)
        self._lock = threading.Lock()
        self._connections = 0
        self.total_queries = 0
        super().__init__((config.host, config.port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def next_connection(self) -> int:
        with self._lock:
            self._connections += 1
            return self._connections - 1

    def count(self) -> None:
        with self._lock:
            self.total_queries += 1

    def start(self) -> "PredictionServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve(config: ServerConfig, model: Model | None = None, background: bool = True) -> PredictionServer:
    """Bind and start answering. The model comes from ``config.checkpoint`` unless given."""
    if model is None:
        if config.checkpoint is None:
            raise ValueError("no checkpoint configured")
        model = load_checkpoint(config.checkpoint)
    else:
        model = model.copy()
    stack_oracles(ModelOracle(model), config.wrappers)  # validate the stack up front
    server = PredictionServer(config, model)
    log.info("serving on %s:%s", *server.address)
    if background:
        return server.start()
    server.serve_forever()
    return server


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class RemoteOracle(PredictionOracle):
    """Oracle over the wire protocol.

    Batches are pipelined in windows of ``window`` requests and matched by id.
    On connection loss the unanswered part of the window is re-sent after a
    backoff (``retries`` attempts, doubling from ``backoff`` seconds).
    """

    def __init__(self, address, num_classes: int, input_shape, window: int = 64,
                 retries: int = 3, backoff: float = 0.1, timeout: float = 30.0):
        super().__init__(num_classes, input_shape)
        self.address = parse_address(address) if isinstance(address, str) else tuple(address)
        self.window = window
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._next_id = 0
        self._sock = None
        self._reader = None

    def _connect(self):
        self.close()
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._reader = self._sock.makefile("rb")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._reader.close()
                self._sock.close()
            except OSError:
                pass
        self._sock = self._reader = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _exchange(self, pending: dict[int, np.ndarray], out: dict[int, np.ndarray]) -> None:
        if self._sock is None:
            self._connect()
        self._sock.sendall(b"".join(encode_request(i, x) for i, x in pending.items()))
        while pending:
            line = self._reader.readline()
            if not line:
                raise ConnectionError("server closed the connection")
            id, probs, error = decode_response(line)
            if error is not None:
                raise OracleError(f"server error {error!r} for request {id}")
            if id not in pending:
                continue
            if probs.shape != (self.num_classes,):
                raise OracleError(f"response {id} has {probs.size} probabilities")
            out[id] = probs
            del pending[id]
            self._tick()

    def query_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
        results: dict[int, np.ndarray] = {}
        ids = []
        for start in range(0, len(xs), self.window):
            pending = {}
            for x in xs[start:start + self.window]:
                pending[self._next_id] = x
                ids.append(self._next_id)
                self._next_id += 1
            for attempt in range(self.retries + 1):
                try:
                    self._exchange(pending, results)
                    break
                except (ConnectionError, socket.timeout, OSError) as exc:
                    self.close()
                    if attempt == self.retries:
                        raise OracleError(f"connection failed after {self.queries} answered queries: {exc}") from exc
                    time.sleep(self.backoff * 2**attempt)
        return np.stack([results[i] for i in ids])


def remote_oracle(address, num_classes: int = 10, input_shape=(28, 28, 1), **kw) -> RemoteOracle:
    return RemoteOracle(address, num_classes, input_shape, **kw)
