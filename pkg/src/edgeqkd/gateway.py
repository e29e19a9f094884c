"""Client-domain gateway: reverse proxy, device app, and client-side SAE.

Client programs speak plain HTTP to the gateway and never see anything
else. On the first request for a route the gateway discovers the
application, creates an application context, negotiates a cipher suite
with the serving host, and binds a key; afterwards it encrypts request
bodies, invokes the remote instance, and decrypts responses, rolling keys
per the refresh policy. Establishment is single-flight per route, so a
burst of first requests costs exactly one context and one key.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from . import channel
from .clock import Clock
from .control import Mx2Client
from .errors import (
    AppNotFoundError,
    ContextDeletedError,
    EdgeQkdError,
    KeyExhaustedError,
    NoRouteError,
    NotFoundError,
    UnauthorizedError,
    UnknownContextError,
    error_for_code,
)
from .keystore import KeyStore
from .transport import (
    Router,
    Transport,
    WireRequest,
    WireResponse,
    error_response,
    json_response,
    raise_for_status,
)
from .wire import decode_error

logger = logging.getLogger(__name__)


class ClientKeyStore(KeyStore):
    """Domain key store that also caches context data (endpoints) per route."""

    def __init__(self, clock: Clock, max_age_sec: float) -> None:
        super().__init__(clock, max_age_sec)
        self._endpoints: dict[str, dict] = {}
        self._endpoint_lock = threading.Lock()

    def put_endpoint(self, route: str, context_doc: dict) -> None:
        with self._endpoint_lock:
            self._endpoints[route] = dict(context_doc)

    def get_endpoint(self, route: str) -> dict | None:
        with self._endpoint_lock:
            return self._endpoints.get(route)

    def drop_endpoint(self, route: str) -> None:
        with self._endpoint_lock:
            self._endpoints.pop(route, None)


@dataclass
class RouteBinding:
    path_prefix: str
    app_name: str
    provider: str
    version: str
    plaintext: bool = False  # diagnostic passthrough, defeats the whole point
    context_id: str | None = None
    endpoint_uri: str | None = None
    security: channel.SecurityContext | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)


class Gateway:
    def __init__(self, *, bindings: list[RouteBinding], transport: Transport,
                 lcmp_url: str, kme, key_store: ClientKeyStore,
                 policy: channel.RefreshPolicy, clock: Clock,
                 registry: dict[int, channel.CipherSuite] | None = None,
                 offered_suites: tuple[int, ...] = (1,),
                 sae_id: str = "sae-client", server_sae: str = "sae-mec",
                 auth_token: str | None = None,
                 component: str = "gateway") -> None:
        self._bindings = sorted(bindings, key=lambda b: len(b.path_prefix), reverse=True)
        self._transport = transport
        self._mx2 = Mx2Client(transport, src=component, base_url=lcmp_url)
        self._kme = kme
        self._store = key_store
        self._policy = policy
        self._clock = clock
        self._registry = registry if registry is not None else channel.default_registry()
        self._offered = tuple(offered_suites)
        self._sae = sae_id
        self._server_sae = server_sae
        self._auth_token = auth_token
        self._component = component

    # -- establishment -----------------------------------------------------------

    def _match(self, path: str) -> RouteBinding:
        for binding in self._bindings:
            prefix = binding.path_prefix.rstrip("/")
            if path == prefix or path.startswith(prefix + "/") or path == prefix + "/":
                return binding
        raise NoRouteError(f"no route bound for {path}")

    def init_app(self, binding: RouteBinding) -> dict:
        """Discovery plus context creation; returns the new context document."""
        found = self._mx2.lookup(binding.app_name, binding.provider, binding.version)
        if not found:
            raise AppNotFoundError(
                f"{binding.app_name} {binding.version} by {binding.provider} is not offered"
            )
        doc = self._mx2.create_context(binding.app_name, binding.provider, binding.version)
        binding.context_id = str(doc["context_id"])
        binding.endpoint_uri = str(doc["endpoint_uri"])
        self._store.put_endpoint(binding.path_prefix, doc)
        return doc

    def _host_base(self, endpoint_uri: str) -> str:
        parts = urlsplit(endpoint_uri)
        return f"{parts.scheme}://{parts.netloc}"

    def _hello(self, base: str, offered) -> int:
        response = self._transport.request(
            src=self._component, channel="handshake", method="POST",
            url=base + "/sae/v1/hello",
            body=channel.encode_client_hello(self._sae, list(offered)),
            headers={"content-type": "application/json"},
        )
        raise_for_status(response)
        return channel.decode_server_hello(response.body)

    def _announce(self, base: str, key_id: str, suite_id: int) -> None:
        response = self._transport.request(
            src=self._component, channel="handshake", method="POST",
            url=base + "/sae/v1/announce",
            body=channel.encode_key_announce(self._sae, key_id, suite_id),
            headers={"content-type": "application/json"},
        )
        raise_for_status(response)

    def _ensure_ready(self, binding: RouteBinding) -> None:
        with binding.lock:
            if binding.context_id is None:
                self.init_app(binding)
            if binding.plaintext or binding.security is not None:
                return
            assert binding.endpoint_uri is not None
            base = self._host_base(binding.endpoint_uri)
            binding.security = channel.establish_context(
                self._sae, self._server_sae, self._offered, self._kme, self._store,
                self._policy, clock=self._clock,
                hello=lambda offered: self._hello(base, offered),
                announce=lambda key_id, suite_id: self._announce(base, key_id, suite_id),
                registry=self._registry,
            )

    def _purge_binding(self, binding: RouteBinding) -> None:
        with binding.lock:
            if binding.security is not None:
                self._store.purge(binding.security.issued_key_ids)
            binding.security = None
            binding.context_id = None
            binding.endpoint_uri = None
            self._store.drop_endpoint(binding.path_prefix)

    def teardown(self, binding: RouteBinding) -> None:
        """Delete the route's context and scrub its keys; idempotent."""
        with binding.lock:
            if binding.context_id is not None:
                try:
                    self._mx2.delete_context(binding.context_id)
                except UnknownContextError:
                    logger.warning("context %s was already gone", binding.context_id)
            else:
                logger.warning("teardown of %s without an active context", binding.path_prefix)
            self._purge_binding(binding)

    def binding_for(self, path: str) -> RouteBinding:
        return self._match(path)

    # -- request path ------------------------------------------------------------

    def handle_request(self, path: str, body: bytes,
                       headers: dict[str, str] | None = None) -> WireResponse:
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        try:
            if self._auth_token is not None:
                if headers.get("authorization") != f"Bearer {self._auth_token}":
                    raise UnauthorizedError("missing or invalid bearer token")
            binding = self._match(path)
            return self._proxy(binding, body)
        except KeyExhaustedError as exc:
            if exc.retry_after is None:
                exc.retry_after = 1.0  # clients must still get a Retry-After hint
            return error_response(exc)
        except EdgeQkdError as exc:
            return error_response(exc)

    def _proxy(self, binding: RouteBinding, body: bytes) -> WireResponse:
        last_error: EdgeQkdError | None = None
        for attempt in (0, 1):
            self._ensure_ready(binding)
            try:
                if binding.plaintext:
                    return self._invoke_plaintext(binding, body)
                return self._invoke_secure(binding, body)
            except (ContextDeletedError, NotFoundError) as exc:
                # the context or instance vanished underneath us: rebuild once
                last_error = exc
                self._purge_binding(binding)
                continue
        assert last_error is not None
        raise last_error

    def _invoke_secure(self, binding: RouteBinding, body: bytes) -> WireResponse:
        assert binding.security is not None and binding.endpoint_uri is not None
        ctx = binding.security
        envelope = channel.encrypt(ctx, body, self._store, self._kme, clock=self._clock)
        response = self._transport.request(
            src=self._component, channel="data", method="POST",
            url=binding.endpoint_uri + "/invoke", body=envelope.to_bytes(),
            headers={"content-type": "application/json",
                     "x-app-context-id": binding.context_id or ""},
        )
        if response.headers.get("x-envelope") == "1":
            reply = channel.EncryptedEnvelope.from_bytes(response.body)
            plaintext = channel.decrypt(reply, self._store, response=True,
                                        registry=self._registry)
            if response.status == 200:
                return WireResponse(status=200,
                                    headers={"content-type": "application/octet-stream"},
                                    body=plaintext)
            # sealed handler failure: surface the decrypted error body
            return WireResponse(status=response.status,
                                headers={"content-type": "application/json"},
                                body=plaintext)
        if response.status >= 400:
            code, message = decode_error(response.body)
            raise error_for_code(code, message)
        return response

    def _invoke_plaintext(self, binding: RouteBinding, body: bytes) -> WireResponse:
        assert binding.endpoint_uri is not None
        response = self._transport.request(
            src=self._component, channel="data", method="POST",
            url=binding.endpoint_uri + "/invoke_plain", body=body,
            headers={"x-app-context-id": binding.context_id or ""},
        )
        if response.status >= 400:
            code, message = decode_error(response.body)
            raise error_for_code(code, message)
        return WireResponse(status=200,
                            headers={"content-type": "application/octet-stream"},
                            body=response.body)

    # -- wire surface ------------------------------------------------------------

    def router(self) -> Router:
        router = Router()
        router.set_fallback(self._w_any)
        return router

    def _w_any(self, request: WireRequest) -> WireResponse:
        if request.method != "POST":
            return json_response(405, {"message": "only POST is proxied", "code": "no-route"})
        return self.handle_request(request.path, request.body, request.headers)

    def bindings(self) -> list[RouteBinding]:
        return list(self._bindings)
