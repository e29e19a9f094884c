"""Real HTTP bindings for component routers.

Each component can be served by a ThreadingHTTPServer on a loopback port;
the HttpTransport gives callers the same request() surface as the
in-process transport, still recording every exchange in the transcript.
"""

from __future__ import annotations

import http.client
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping
from urllib.parse import parse_qsl, urlsplit

from .clock import Clock, SystemClock
from .errors import PeerUnreachableError
from .transport import (
    Router,
    Transcript,
    Transport,
    WireRequest,
    WireResponse,
    frame_request,
    frame_response,
)

_HOP_HEADERS = {"content-length", "host", "connection", "accept-encoding", "user-agent"}


class ComponentHttpServer:
    """One component served over loopback HTTP. Router may be set after bind
    (the bound port is often needed to construct the component itself)."""

    def __init__(self, name: str, router: Router | None = None) -> None:
        self.name = name
        self.router = router
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet by design
                pass

            def _serve(self) -> None:
                length = int(self.headers.get("content-length", 0) or 0)
                body = self.rfile.read(length) if length else b""
                parts = urlsplit(self.path)
                request = WireRequest(
                    method=self.command, path=parts.path,
                    headers={k.lower(): v for k, v in self.headers.items()},
                    body=body, query=dict(parse_qsl(parts.query)),
                )
                if outer.router is None:
                    response = WireResponse(status=503, body=b"{}")
                else:
                    response = outer.router.dispatch(request)
                body = b"" if response.status in (204, 304) else response.body
                self.send_response(response.status)
                for name, value in response.headers.items():
                    self.send_header(name, value)
                self.send_header("content-length", str(len(body)))
                self.end_headers()
                if body:
                    self.wfile.write(body)

            do_GET = do_POST = do_DELETE = do_PUT = _serve

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ComponentHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name=f"httpd-{self.name}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class HttpTransport(Transport):
    """Client side of component HTTP, with transcript taps at the caller."""

    def __init__(self, transcript: Transcript | None = None, clock: Clock | None = None,
                 names: Mapping[str, str] | None = None, timeout: float = 10.0) -> None:
        self._clock = clock or SystemClock()
        self.transcript = transcript if transcript is not None else Transcript(self._clock)
        self._names = dict(names or {})  # authority -> component name
        self._timeout = timeout

    def register_name(self, authority: str, name: str) -> None:
        self._names[authority] = name

    def request(self, *, src: str, channel: str, method: str, url: str,
                headers: Mapping[str, str] | None = None, body: bytes = b"",
                query: Mapping[str, str] | None = None) -> WireResponse:
        parts = urlsplit(url)
        if parts.scheme != "http":
            raise PeerUnreachableError(f"unsupported URL scheme {parts.scheme!r}")
        query_map = dict(query or {})
        query_map.update(dict(parse_qsl(parts.query)))
        req_headers = {k.lower(): v for k, v in (headers or {}).items()}
        dst = self._names.get(parts.netloc, parts.netloc)
        self.transcript.append(src, dst, channel,
                               frame_request(method, parts.path, query_map, req_headers, body))
        path = parts.path
        if query_map:
            path += "?" + "&".join(f"{k}={v}" for k, v in sorted(query_map.items()))
        try:
            conn = http.client.HTTPConnection(parts.netloc, timeout=self._timeout)
            try:
                conn.request(method.upper(), path, body=body, headers=req_headers)
                raw = conn.getresponse()
                resp_body = raw.read()
                resp_headers = {k.lower(): v for k, v in raw.getheaders()
                                if k.lower() not in _HOP_HEADERS}
                response = WireResponse(status=raw.status, headers=resp_headers, body=resp_body)
            finally:
                conn.close()
        except OSError as exc:
            raise PeerUnreachableError(f"cannot reach {parts.netloc}: {exc}") from exc
        self.transcript.append(dst, src, channel,
                               frame_response(response.status, method, parts.path, query_map,
                                              response.headers, response.body))
        return response
