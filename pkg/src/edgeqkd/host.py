"""Edge execution node: function instances behind a decrypting entry point.

Every request reaching an instance is an encrypted envelope. The host
resolves the key (local store first, then a consume-once fetch from its
key-management entity, single-flight per key id), decrypts, runs the
registered handler, optionally forwards the intermediate result one hop to
a chained instance inside the same perimeter, and seals the result under
the same key the request used. Nothing leaves the host toward the client
domain in the clear, handler failures included.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

from . import channel
from .clock import Clock
from .errors import (
    AlreadyConsumedError,
    BadLengthError,
    CapacityExhaustedError,
    ContextDeletedError,
    EdgeQkdError,
    MalformedError,
    NotFoundError,
    UnknownAppImageError,
    UnknownKeyIdError,
)
from .keystore import KeyStore
from .transport import Router, Transport, WireRequest, WireResponse, json_response
from .wire import dumps, loads

Handler = Callable[[bytes], bytes]


def _fn_echo(body: bytes) -> bytes:
    return body


def _fn_upper(body: bytes) -> bytes:
    return body.decode("utf-8").upper().encode("utf-8")


def _fn_sum(body: bytes) -> bytes:
    try:
        values = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"input is not JSON: {exc}") from exc
    if not isinstance(values, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in values
    ):
        raise ValueError("input must be a JSON array of integers")
    return dumps(sum(values))


BUILTIN_HANDLERS: dict[str, Handler] = {
    "fn-echo": _fn_echo,
    "fn-upper": _fn_upper,
    "fn-sum": _fn_sum,
}


@dataclass
class MecAppInstance:
    app_doc: dict
    uri: str
    path: str  # instance segment under /apps/
    handler: Handler
    sae_id: str
    shareable: bool
    chain_uri: str | None = None
    active_contexts: set[str] = field(default_factory=set)


class _Inflight:
    """Coordination record for single-flight key fetches."""

    def __init__(self) -> None:
        self.event = threading.Event()
        self.error: Exception | None = None


class MecHost:
    def __init__(self, host_id: str, total_slots: int, *, base_url: str,
                 sae_id: str, kme, key_store: KeyStore, clock: Clock,
                 transport: Transport, master_sae: str = "sae-client",
                 registry: Mapping[int, channel.CipherSuite] | None = None,
                 handlers: Mapping[str, Handler] | None = None) -> None:
        self.host_id = host_id
        self.total_slots = total_slots
        self.used_slots = 0
        self.base_url = base_url.rstrip("/")
        self.sae_id = sae_id
        self.master_sae = master_sae
        self._kme = kme
        self._store = key_store
        self._clock = clock
        self._transport = transport
        self._registry = dict(registry) if registry is not None else channel.default_registry()
        self._handlers = dict(handlers) if handlers is not None else dict(BUILTIN_HANDLERS)
        self._instances: dict[str, MecAppInstance] = {}  # by path segment
        self._announced: dict[str, tuple[str, int]] = {}  # client sae -> (key id, suite)
        self._seq = 0
        self._lock = threading.RLock()
        self._inflight: dict[str, _Inflight] = {}
        self._inflight_lock = threading.Lock()
        self.dec_fetches = 0

    # -- management ------------------------------------------------------------

    def deploy(self, app_doc: dict, handler_name: str, shareable: bool,
               chain_uri: str | None) -> MecAppInstance:
        handler = self._handlers.get(handler_name)
        if handler is None:
            raise UnknownAppImageError(f"no function image {handler_name!r}")
        required = int(app_doc.get("required_slots", 1))
        with self._lock:
            if self.used_slots + required > self.total_slots:
                raise CapacityExhaustedError(f"host {self.host_id} is full")
            self._seq += 1
            segment = f"{app_doc.get('app_name', 'app')}-{self._seq}"
            instance = MecAppInstance(
                app_doc=dict(app_doc), uri=f"{self.base_url}/apps/{segment}",
                path=segment, handler=handler, sae_id=self.sae_id,
                shareable=shareable, chain_uri=chain_uri,
            )
            self._instances[segment] = instance
            self.used_slots += required
            return instance

    def undeploy(self, uri: str) -> None:
        with self._lock:
            segment = self._segment_for(uri)
            instance = self._instances.pop(segment, None)
            if instance is None:
                raise NotFoundError(f"no instance at {uri}")
            self.used_slots -= int(instance.app_doc.get("required_slots", 1))

    def attach_context(self, uri: str, context_id: str) -> None:
        with self._lock:
            self._instance_at(uri).active_contexts.add(context_id)

    def detach_context(self, uri: str, context_id: str) -> None:
        with self._lock:
            self._instance_at(uri).active_contexts.discard(context_id)

    def _segment_for(self, uri: str) -> str:
        return uri.rstrip("/").rsplit("/", 1)[-1]

    def _instance_at(self, uri: str) -> MecAppInstance:
        instance = self._instances.get(self._segment_for(uri))
        if instance is None:
            raise NotFoundError(f"no instance at {uri}")
        return instance

    def instances(self) -> list[MecAppInstance]:
        with self._lock:
            return list(self._instances.values())

    # -- key handling ------------------------------------------------------------

    def _resolve_key(self, key_id: str, suite_id: int) -> None:
        """Fetch-and-cache a key by id; concurrent callers share one fetch."""
        if key_id in self._store:
            return
        with self._inflight_lock:
            flight = self._inflight.get(key_id)
            leader = flight is None
            if leader:
                flight = _Inflight()
                self._inflight[key_id] = flight
        if not leader:
            flight.event.wait()
            if flight.error is not None:
                raise flight.error
            return
        try:
            if key_id not in self._store:
                fetched = self._kme.get_dec_keys(self.master_sae, [key_id])
                self.dec_fetches += 1
                _, key_bits = fetched[0]
                self._store.put(key_id, key_bits, suite_id)
        except Exception as exc:
            flight.error = exc
            raise
        finally:
            flight.event.set()
            with self._inflight_lock:
                self._inflight.pop(key_id, None)

    # -- invocation ----------------------------------------------------------------

    def invoke(self, instance: MecAppInstance, context_id: str | None,
               envelope: channel.EncryptedEnvelope) -> WireResponse:
        if context_id is None or context_id not in instance.active_contexts:
            raise ContextDeletedError("no active application context for this instance")
        try:
            self._resolve_key(envelope.key_id, envelope.suite_id)
        except (UnknownKeyIdError, AlreadyConsumedError) as exc:
            # consumption state is internal to the key plane; callers only
            # learn that the key cannot be obtained
            raise UnknownKeyIdError(str(exc)) from exc
        plaintext = channel.decrypt(envelope, self._store, registry=self._registry)
        try:
            result = instance.handler(plaintext)
            if instance.chain_uri is not None:
                result = self._invoke_chained(instance.chain_uri, result)
        except Exception as exc:
            # whatever went wrong mid-execution, the detail leaves sealed only
            payload = dumps({"error": str(exc), "code": "handler-error"})
            sealed = channel.encrypt_response(envelope, payload, self._store,
                                              self.sae_id, registry=self._registry)
            return WireResponse(
                status=500,
                headers={"content-type": "application/json", "x-envelope": "1",
                         "x-error-code": "handler-error"},
                body=sealed.to_bytes(),
            )
        sealed = channel.encrypt_response(envelope, result, self._store,
                                          self.sae_id, registry=self._registry)
        return WireResponse(
            status=200,
            headers={"content-type": "application/json", "x-envelope": "1"},
            body=sealed.to_bytes(),
        )

    def _invoke_chained(self, chain_uri: str, payload: bytes) -> bytes:
        # second hop stays inside the perimeter, no envelope required
        response = self._transport.request(
            src=self.host_id, channel="mec-internal", method="POST",
            url=chain_uri + "/invoke_plain", body=payload,
        )
        if response.status != 200:
            raise EdgeQkdError(f"chained invocation failed with {response.status}")
        return response.body

    # -- wire surface ------------------------------------------------------------

    def router(self) -> Router:
        router = Router()
        router.add("POST", "/mgmt/v1/deploy", self._w_deploy)
        router.add("POST", "/mgmt/v1/undeploy", self._w_undeploy)
        router.add("POST", "/mgmt/v1/attach", self._w_attach)
        router.add("POST", "/mgmt/v1/detach", self._w_detach)
        router.add("POST", "/sae/v1/hello", self._w_hello)
        router.add("POST", "/sae/v1/announce", self._w_announce)
        router.add("POST", "/apps/{segment}/invoke", self._w_invoke)
        router.add("POST", "/apps/{segment}/invoke_plain", self._w_invoke_plain)
        router.add("GET", "/apps/{segment}/healthz", self._w_healthz)
        return router

    def _w_deploy(self, request: WireRequest):
        doc = loads(request.body)
        if not isinstance(doc, dict) or not isinstance(doc.get("app"), dict):
            raise MalformedError("deploy body must carry an app object")
        handler_name = str(doc.get("handler", doc["app"].get("app_name", "")))
        instance = self.deploy(doc["app"], handler_name,
                               bool(doc.get("shareable", True)), doc.get("chain_uri"))
        return json_response(200, {"uri": instance.uri})

    def _w_undeploy(self, request: WireRequest):
        doc = loads(request.body)
        self.undeploy(str(doc.get("uri", "")))
        return json_response(200, {})

    def _w_attach(self, request: WireRequest):
        doc = loads(request.body)
        self.attach_context(str(doc.get("uri", "")), str(doc.get("context_id", "")))
        return json_response(200, {})

    def _w_detach(self, request: WireRequest):
        doc = loads(request.body)
        self.detach_context(str(doc.get("uri", "")), str(doc.get("context_id", "")))
        return json_response(200, {})

    def _w_hello(self, request: WireRequest):
        _, offered = channel.decode_client_hello(request.body)
        if not offered:
            raise BadLengthError("client hello offered no cipher suites")
        selected = channel.negotiate(offered, sorted(self._registry))
        return WireResponse(status=200, headers={"content-type": "application/json"},
                            body=channel.encode_server_hello(selected))

    def _w_announce(self, request: WireRequest):
        client_sae, key_id, suite_id = channel.decode_key_announce(request.body)
        if suite_id not in self._registry:
            raise MalformedError(f"announced unknown cipher suite {suite_id}")
        # the key itself is fetched lazily when the first envelope names it
        self._announced[client_sae] = (key_id, suite_id)
        return json_response(200, {})

    def _w_invoke(self, request: WireRequest, segment: str):
        with self._lock:
            instance = self._instances.get(segment)
        if instance is None:
            raise NotFoundError(f"no instance {segment!r} on host {self.host_id}")
        envelope = channel.EncryptedEnvelope.from_bytes(request.body)
        return self.invoke(instance, request.headers.get("x-app-context-id"), envelope)

    def _w_invoke_plain(self, request: WireRequest, segment: str):
        with self._lock:
            instance = self._instances.get(segment)
        if instance is None:
            raise NotFoundError(f"no instance {segment!r} on host {self.host_id}")
        try:
            result = instance.handler(request.body)
            if instance.chain_uri is not None:
                result = self._invoke_chained(instance.chain_uri, result)
        except EdgeQkdError:
            raise
        except Exception as exc:
            return json_response(500, {"message": str(exc), "code": "handler-error"})
        return WireResponse(status=200, headers={"content-type": "application/octet-stream"},
                            body=result)

    def _w_healthz(self, request: WireRequest, segment: str):
        with self._lock:
            if segment not in self._instances:
                raise NotFoundError(f"no instance {segment!r}")
        return json_response(200, {"status": "ok"})
