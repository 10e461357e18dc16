"""The black-box boundary: hard labels only, with a query budget.

A :class:`LabelOracle` wraps any object with a ``predict`` method.  It can be
exposed over HTTP with :func:`serve` and consumed through
:class:`RemoteOracle`, which behaves like the local object.

Wire protocol::

    POST /v1/predict  {"samples": [[f, ...], ...]}
        200 {"labels": [int, ...], "spent": int, "remaining": int|null}
        429 {"error": "budget_exhausted", "detail": ...}
        422 {"error": "invalid_query", "detail": ..., "rows": [int, ...]}
        400 {"error": "bad_request", "detail": ...}
    GET  /v1/status   {"n_j": int, "n_c": int, "spent": int, "remaining": int|null}

``remaining`` is ``null`` for an unlimited oracle.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .data import DatasetSchema
from .errors import BudgetExhausted, InvalidQuery, SchemaError, TransportError

logger = logging.getLogger(__name__)

UNLIMITED = math.inf


class LabelOracle:
    """Label-only view of a target model with all-or-nothing budget charging.

    Every submitted row is charged, duplicates included.  The check and the
    charge happen under one lock, so concurrent callers can never push
    ``spent`` past ``budget``.
    """

    def __init__(self, target, schema: DatasetSchema, budget=None, reject_invalid=False,
                 log_queries=False):
        if budget is not None and budget < 0:
            raise ValueError("budget must be non-negative")
        self._target = target
        self.schema = schema
        self.budget = UNLIMITED if budget is None else int(budget)
        self.reject_invalid = reject_invalid
        self.query_log = [] if log_queries else None
        self._spent = 0
        self._lock = threading.Lock()

    @property
    def spent(self) -> int:
        return self._spent

    def remaining(self):
        if self.budget == UNLIMITED:
            return UNLIMITED
        return self.budget - self._spent

    def query(self, batch) -> np.ndarray:
        X = np.asarray(batch, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] != self.schema.n_features:
            raise SchemaError(
                f"query must be a non-empty (N, {self.schema.n_features}) matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise SchemaError("query contains non-finite values")
        if self.reject_invalid:
            bad = np.flatnonzero(~self.schema.contains(X).all(axis=1))
            if len(bad):
                raise InvalidQuery(bad.tolist(), "values outside the feature domains")
        n = X.shape[0]
        with self._lock:
            left = self.remaining()
            if n > left:
                raise BudgetExhausted(n, left)
            self._spent += n
        labels = np.asarray(self._target.predict(X), dtype=np.int64)
        if self.query_log is not None:
            with self._lock:
                for row, lab in zip(X, labels):
                    digest = hashlib.blake2b(row.tobytes(), digest_size=16).hexdigest()
                    self.query_log.append((digest, int(lab)))
        return labels

    def status(self) -> dict:
        rem = self.remaining()
        return {"n_j": self.schema.n_features, "n_c": self.schema.n_classes,
                "spent": self.spent, "remaining": None if rem == UNLIMITED else int(rem)}


class _Handler(BaseHTTPRequestHandler):
    oracle: LabelOracle = None  # set per server subclass

    def log_message(self, fmt, *args):
        logger.debug("oracle http: " + fmt, *args)

    def _send(self, code, payload):
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.rstrip("/") == "/v1/status":
            self._send(200, self.oracle.status())
        else:
            self._send(404, {"error": "bad_request", "detail": f"no route {self.path}"})

    def do_POST(self):
        if self.path.rstrip("/") != "/v1/predict":
            self._send(404, {"error": "bad_request", "detail": f"no route {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            doc = json.loads(self.rfile.read(length) or b"null")
            samples = doc["samples"]
            if not isinstance(samples, list) or not all(
                    isinstance(r, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                for v in r) for r in samples):
                raise ValueError("samples must be a list of numeric arrays")
            labels = self.oracle.query(np.array(samples, dtype=np.float64))
        except BudgetExhausted as exc:
            self._send(429, {"error": "budget_exhausted", "detail": str(exc),
                             "remaining": exc.remaining if exc.remaining != UNLIMITED else None})
            return
        except InvalidQuery as exc:
            self._send(422, {"error": "invalid_query", "detail": str(exc), "rows": exc.rows})
            return
        except (ValueError, KeyError, TypeError) as exc:
            self._send(400, {"error": "bad_request", "detail": str(exc)})
            return
        status = self.oracle.status()
        self._send(200, {"labels": labels.tolist(), "spent": status["spent"],
                         "remaining": status["remaining"]})


class OracleServer(ThreadingHTTPServer):
    daemon_threads = True

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "OracleServer":
        """Serve from a daemon thread; returns self."""
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        self._thread = thread
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve(oracle: LabelOracle, address=("127.0.0.1", 0)) -> OracleServer:
    """Bind an HTTP endpoint for ``oracle``.  Call ``.start()`` or ``.serve_forever()``."""
    handler = type("OracleHandler", (_Handler,), {"oracle": oracle})
    return OracleServer(tuple(address), handler)


class RemoteOracle:
    """Client for :func:`serve`; mirrors the :class:`LabelOracle` surface."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        st = self._request("GET", "/v1/status")
        self.schema = DatasetSchema.binary(st["n_j"], st["n_c"])
        self._last = st

    def _request(self, method, route, payload=None):
        data = None if payload is None else json.dumps(payload).encode()
        req = urllib.request.Request(self.url + route, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                doc = json.loads(exc.read())
            except ValueError:
                raise TransportError(f"HTTP {exc.code} from {self.url}") from None
            kind = doc.get("error")
            if kind == "budget_exhausted":
                rem = doc.get("remaining")
                n = len(payload["samples"]) if payload else 0
                raise BudgetExhausted(n, UNLIMITED if rem is None else rem) from None
            if kind == "invalid_query":
                raise InvalidQuery(doc.get("rows", []), doc.get("detail", "")) from None
            if kind == "bad_request":
                raise SchemaError(doc.get("detail", "bad request")) from None
            raise TransportError(f"HTTP {exc.code}: {doc}") from None
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"cannot reach oracle at {self.url}: {exc}") from None

    def query(self, batch) -> np.ndarray:
        X = np.asarray(batch, dtype=np.float64)
        doc = self._request("POST", "/v1/predict", {"samples": X.tolist()})
        self._last = doc
        return np.asarray(doc["labels"], dtype=np.int64)

    def status(self) -> dict:
        st = self._request("GET", "/v1/status")
        self._last = st
        return st

    @property
    def spent(self) -> int:
        return self.status()["spent"]

    def remaining(self):
        rem = self.status()["remaining"]
        return UNLIMITED if rem is None else rem
