"""Message plumbing between components.

Components expose a Router over (method, path) and are reachable through a
Transport by URL. The in-process transport routes calls directly; the HTTP
transport (see httpd) does the same over real sockets. Either way, every
exchange is recorded in a Transcript as two frames (request and response)
so scenario metrics and the wiretap can be computed from the record alone.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping
from urllib.parse import parse_qsl, urlsplit

from .clock import Clock, SystemClock
from .errors import EdgeQkdError, NotFoundError, PeerUnreachableError, error_for_code
from .wire import b64decode, b64encode, decode_error, dumps, encode_error

# Channels crossing the client/edge trust boundary; everything a passive
# observer between the two domains could see travels on one of these.
INTER_DOMAIN_CHANNELS = frozenset({"mx2", "handshake", "data"})


@dataclass
class WireRequest:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    query: dict[str, str] = field(default_factory=dict)


@dataclass
class WireResponse:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


def json_response(status: int, obj: Any, headers: dict[str, str] | None = None) -> WireResponse:
    hdrs = {"content-type": "application/json"}
    if headers:
        hdrs.update(headers)
    return WireResponse(status=status, headers=hdrs, body=dumps(obj))


def error_response(exc: EdgeQkdError) -> WireResponse:
    headers = {"content-type": "application/json"}
    if exc.retry_after is not None:
        headers["retry-after"] = str(max(1, int(-(-exc.retry_after // 1))))
    return WireResponse(status=exc.http_status, headers=headers, body=encode_error(exc.code, exc.message))


class Router:
    """Minimal (method, path-pattern) dispatcher; {name} segments capture."""

    def __init__(self) -> None:
        self._routes: list[tuple[str, list[str], Callable[..., WireResponse]]] = []
        self._fallback: Callable[[WireRequest], WireResponse] | None = None

    def add(self, method: str, pattern: str, fn: Callable[..., WireResponse]) -> None:
        self._routes.append((method.upper(), pattern.strip("/").split("/"), fn))

    def set_fallback(self, fn: Callable[[WireRequest], WireResponse]) -> None:
        self._fallback = fn

    def _match(self, method: str, path: str) -> tuple[Callable[..., WireResponse], dict[str, str]] | None:
        segments = path.strip("/").split("/")
        for route_method, pattern, fn in self._routes:
            if route_method != method.upper() or len(pattern) != len(segments):
                continue
            params: dict[str, str] = {}
            for expected, actual in zip(pattern, segments):
                if expected.startswith("{") and expected.endswith("}"):
                    params[expected[1:-1]] = actual
                elif expected != actual:
                    break
            else:
                return fn, params
        return None

    def dispatch(self, request: WireRequest) -> WireResponse:
        try:
            matched = self._match(request.method, request.path)
            if matched is None:
                if self._fallback is not None:
                    return self._fallback(request)
                raise NotFoundError(f"no route for {request.method} {request.path}")
            fn, params = matched
            return fn(request, **params)
        except EdgeQkdError as exc:
            return error_response(exc)


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------

def _render_query(query: Mapping[str, str]) -> str:
    if not query:
        return ""
    return "?" + "&".join(f"{k}={v}" for k, v in sorted(query.items()))


def frame_request(method: str, path: str, query: Mapping[str, str], headers: Mapping[str, str], body: bytes) -> bytes:
    head = [f"REQ {method.upper()} {path}{_render_query(query)}"]
    head += [f"{k}: {v}" for k, v in sorted(headers.items())]
    return ("\n".join(head) + "\n\n").encode("utf-8") + body


def frame_response(status: int, method: str, path: str, query: Mapping[str, str],
                   headers: Mapping[str, str], body: bytes) -> bytes:
    head = [f"RSP {status} {method.upper()} {path}{_render_query(query)}"]
    head += [f"{k}: {v}" for k, v in sorted(headers.items())]
    return ("\n".join(head) + "\n\n").encode("utf-8") + body


@dataclass(frozen=True)
class Frame:
    """A parsed transcript payload (inverse of frame_request/frame_response)."""

    kind: str  # "REQ" | "RSP"
    status: int | None
    method: str
    path: str
    headers: dict[str, str]
    body: bytes


def parse_frame(payload: bytes) -> Frame:
    head, _, body = payload.partition(b"\n\n")
    lines = head.decode("utf-8", "replace").split("\n")
    first = lines[0].split(" ")
    headers: dict[str, str] = {}
    for line in lines[1:]:
        name, _, value = line.partition(": ")
        if name:
            headers[name] = value
    if first[0] == "RSP":
        return Frame("RSP", int(first[1]), first[2], first[3] if len(first) > 3 else "", headers, body)
    return Frame("REQ", None, first[1], first[2] if len(first) > 2 else "", headers, body)


class Transcript:
    """Append-only record of every inter-component message."""

    def __init__(self, clock: Clock) -> None:
        self._clock = clock
        self._records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, src: str, dst: str, channel: str, payload: bytes) -> None:
        record = {
            "ts": self._clock.now(),
            "from": src,
            "to": dst,
            "channel": channel,
            "payload_b64": b64encode(payload),
        }
        with self._lock:
            self._records.append(record)

    def records(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._records)

    def to_ndjson(self) -> bytes:
        return b"".join(dumps(rec) + b"\n" for rec in self.records())

    @staticmethod
    def parse_ndjson(data: bytes) -> list[dict[str, Any]]:
        records = []
        for line in data.splitlines():
            if line.strip():
                records.append(json.loads(line))
        return records


def record_payload(record: Mapping[str, Any]) -> bytes:
    return b64decode(record["payload_b64"])


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class Transport:
    def request(self, *, src: str, channel: str, method: str, url: str,
                headers: Mapping[str, str] | None = None, body: bytes = b"",
                query: Mapping[str, str] | None = None) -> WireResponse:
        raise NotImplementedError


class InprocTransport(Transport):
    """Routes inproc:// URLs straight into registered component routers."""

    def __init__(self, transcript: Transcript | None = None, clock: Clock | None = None) -> None:
        self._clock = clock or SystemClock()
        self.transcript = transcript if transcript is not None else Transcript(self._clock)
        self._components: dict[str, Router] = {}

    def register(self, name: str, router: Router) -> None:
        if name in self._components:
            raise ValueError(f"component {name!r} already registered")
        self._components[name] = router

    def request(self, *, src: str, channel: str, method: str, url: str,
                headers: Mapping[str, str] | None = None, body: bytes = b"",
                query: Mapping[str, str] | None = None) -> WireResponse:
        parts = urlsplit(url)
        if parts.scheme != "inproc":
            raise PeerUnreachableError(f"unsupported URL scheme {parts.scheme!r}")
        name = parts.netloc
        query_map = dict(query or {})
        query_map.update(dict(parse_qsl(parts.query)))
        req_headers = {k.lower(): v for k, v in (headers or {}).items()}
        self.transcript.append(src, name, channel,
                               frame_request(method, parts.path, query_map, req_headers, body))
        router = self._components.get(name)
        if router is None:
            response = error_response(PeerUnreachableError(f"unknown component {name!r}"))
        else:
            request = WireRequest(method=method.upper(), path=parts.path,
                                  headers=req_headers, body=body, query=query_map)
            try:
                response = router.dispatch(request)
            except Exception as exc:  # component bug: surface as a 500 frame
                response = error_response(EdgeQkdError(f"unhandled error: {exc}"))
        self.transcript.append(name, src, channel,
                               frame_response(response.status, method, parts.path, query_map,
                                              response.headers, response.body))
        return response


def raise_for_status(response: WireResponse) -> WireResponse:
    """Turn a >=400 response carrying {"message","code"} back into its typed error."""
    if response.status < 400:
        return response
    code, message = decode_error(response.body)
    retry_after = None
    if "retry-after" in response.headers:
        try:
            retry_after = float(response.headers["retry-after"])
        except ValueError:
            retry_after = None
    raise error_for_code(code, message, retry_after=retry_after)


def iter_frames(records: Iterable[Mapping[str, Any]]) -> Iterable[tuple[Mapping[str, Any], Frame]]:
    for record in records:
        yield record, parse_frame(record_payload(record))
