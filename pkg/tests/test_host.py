from __future__ import annotations

import threading

import pytest

from edgeqkd import channel
from edgeqkd.channel import EncryptedEnvelope, RefreshPolicy, establish_context, negotiate
from edgeqkd.clock import SimulatedClock
from edgeqkd.errors import (
    CapacityExhaustedError,
    NotFoundError,
    UnknownAppImageError,
)
from edgeqkd.host import BUILTIN_HANDLERS, MecHost
from edgeqkd.keystore import KeyStore
from edgeqkd.kme import KmeApi, KmeClient, LocalKmeClient, new_kme_pair
from edgeqkd.transport import InprocTransport, raise_for_status
from edgeqkd.wire import dumps, loads

SEED = b"\x33" * 32
CTX = "11111111-2222-4333-8444-555555555555"


def build_host(clock=None, slots=4, max_age=3600.0):
    clock = clock or SimulatedClock()
    transport = InprocTransport(clock=clock)
    master, slave = new_kme_pair(SEED, 0, 1 << 20, clock=clock)
    transport.register("kme-mec", KmeApi(slave).router())
    host = MecHost("edge-a", slots, base_url="inproc://edge-a", sae_id="sae-mec",
                   kme=KmeClient(transport, src="edge-a", base_url="inproc://kme-mec",
                                 channel="qkd"),
                   key_store=KeyStore(clock, max_age), clock=clock, transport=transport)
    transport.register("edge-a", host.router())
    return host, master, transport, clock


def client_side(master, clock, policy=None, suite=1):
    kme = LocalKmeClient(master)
    store = KeyStore(clock, 3600)
    ctx = establish_context(
        "sae-client", "sae-mec", [suite], kme, store,
        policy or RefreshPolicy(10, 3600), clock=clock,
        hello=lambda off: negotiate(off, [1, 2]),
    )
    return ctx, kme, store


def app_doc(name="fn-echo", slots=1):
    return {"app_name": name, "provider": "demo", "version": "1.0", "required_slots": slots}


def test_deploy_assigns_sequential_uris():
    host, *_ = build_host()
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    assert inst.uri == "inproc://edge-a/apps/fn-echo-1"
    inst2 = host.deploy(app_doc(), "fn-echo", True, None)
    assert inst2.uri == "inproc://edge-a/apps/fn-echo-2"
    assert host.used_slots == 2


def test_deploy_full_host():
    host, *_ = build_host(slots=1)
    host.deploy(app_doc(), "fn-echo", True, None)
    with pytest.raises(CapacityExhaustedError):
        host.deploy(app_doc(), "fn-echo", True, None)


def test_deploy_unknown_image():
    host, *_ = build_host()
    with pytest.raises(UnknownAppImageError):
        host.deploy(app_doc("fn-mystery"), "fn-mystery", True, None)


def invoke(host, transport, inst, envelope, context_id=CTX):
    return transport.request(
        src="gateway", channel="data", method="POST", url=inst.uri + "/invoke",
        body=envelope.to_bytes(),
        headers={"x-app-context-id": context_id, "content-type": "application/json"},
    )


def roundtrip(host, master, transport, clock, body, handler="fn-echo", policy=None):
    inst = host.deploy(app_doc(handler), handler, True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock, policy=policy)
    envelope = channel.encrypt(ctx, body, store, kme, clock=clock)
    response = invoke(host, transport, inst, envelope)
    reply = EncryptedEnvelope.from_bytes(response.body)
    plaintext = channel.decrypt(reply, store, response=True)
    return response, reply, plaintext, envelope


def test_invoke_echo_roundtrip():
    host, master, transport, clock = build_host()
    response, reply, plaintext, request = roundtrip(host, master, transport, clock, b"abc")
    assert response.status == 200
    assert plaintext == b"abc"
    assert reply.key_id == request.key_id  # reply sealed under the request key


def test_invoke_upper():
    host, master, transport, clock = build_host()
    _, _, plaintext, _ = roundtrip(host, master, transport, clock, b"qkd", handler="fn-upper")
    assert plaintext == b"QKD"


def test_invoke_sum():
    host, master, transport, clock = build_host()
    _, _, plaintext, _ = roundtrip(host, master, transport, clock, b"[1,2,3,4]", handler="fn-sum")
    assert plaintext == b"10"


def test_handler_error_is_encrypted():
    host, master, transport, clock = build_host()
    inst = host.deploy(app_doc("fn-sum"), "fn-sum", True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock)
    secret = b"not json, secretly: hunter2-hunter2"
    envelope = channel.encrypt(ctx, secret, store, kme, clock=clock)
    response = invoke(host, transport, inst, envelope)
    assert response.status == 500
    assert response.headers.get("x-error-code") == "handler-error"
    assert response.headers.get("x-envelope") == "1"
    assert secret not in response.body  # failure detail leaves only sealed
    reply = EncryptedEnvelope.from_bytes(response.body)
    detail = loads(channel.decrypt(reply, store, response=True))
    assert detail["code"] == "handler-error"


def test_invoke_requires_active_context():
    host, master, transport, clock = build_host()
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock)
    envelope = channel.encrypt(ctx, b"x", store, kme, clock=clock)
    response = invoke(host, transport, inst, envelope, context_id="someone-else")
    assert response.status == 410
    assert b"context-deleted" in response.body
    host.detach_context(inst.uri, CTX)
    response = invoke(host, transport, inst, envelope)
    assert response.status == 410


def test_invoke_unknown_instance():
    host, master, transport, clock = build_host()
    ctx, kme, store = client_side(master, clock)
    envelope = channel.encrypt(ctx, b"x", store, kme, clock=clock)
    response = transport.request(
        src="gateway", channel="data", method="POST",
        url="inproc://edge-a/apps/ghost-9/invoke", body=envelope.to_bytes(),
        headers={"x-app-context-id": CTX},
    )
    assert response.status == 404


def test_consumed_and_evicted_key_is_unknown():
    clock = SimulatedClock()
    host, master, transport, _ = build_host(clock=clock, max_age=5.0)
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock, policy=RefreshPolicy(100, 1e9))
    first = channel.encrypt(ctx, b"one", store, kme, clock=clock)
    assert invoke(host, transport, inst, first).status == 200
    clock.advance(6)  # host cache evicts; the entity already purged the key
    second = channel.encrypt(ctx, b"two", store, kme, clock=clock)
    response = invoke(host, transport, inst, second)
    assert response.status == 404
    assert b"unknown-key-id" in response.body


def test_single_flight_key_fetch():
    host, master, transport, clock = build_host()
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock, policy=RefreshPolicy(100, 1e9))
    envelopes = [channel.encrypt(ctx, b"m%d" % i, store, kme, clock=clock) for i in range(6)]
    assert len({e.key_id for e in envelopes}) == 1  # same fresh key
    barrier = threading.Barrier(6)
    statuses = []
    lock = threading.Lock()

    def worker(envelope):
        barrier.wait()
        response = invoke(host, transport, inst, envelope)
        with lock:
            statuses.append(response.status)

    threads = [threading.Thread(target=worker, args=(e,)) for e in envelopes]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert statuses == [200] * 6
    assert host.dec_fetches == 1  # one consume-once fetch despite the race


def test_key_obtainable_from_exactly_one_place():
    host, master, transport, clock = build_host()
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock)
    envelope = channel.encrypt(ctx, b"x", store, kme, clock=clock)
    key_id = envelope.key_id
    assert master.pair.holds_material(key_id)      # before: entity only
    assert key_id not in host._store
    invoke(host, transport, inst, envelope)
    assert not master.pair.holds_material(key_id)  # after: host store only
    assert key_id in host._store


def test_chained_hop():
    host, master, transport, clock = build_host()
    target = host.deploy(app_doc("fn-upper"), "fn-upper", True, None)
    inst = host.deploy(app_doc("fn-echo"), "fn-echo", True, target.uri)
    host.attach_context(inst.uri, CTX)
    ctx, kme, store = client_side(master, clock)
    envelope = channel.encrypt(ctx, b"chained text", store, kme, clock=clock)
    response = invoke(host, transport, inst, envelope)
    reply = EncryptedEnvelope.from_bytes(response.body)
    assert channel.decrypt(reply, store, response=True) == b"CHAINED TEXT"


def test_healthz_and_undeploy():
    host, _, transport, _ = build_host()
    inst = host.deploy(app_doc(), "fn-echo", True, None)
    response = transport.request(src="gateway", channel="data", method="GET",
                                 url=inst.uri + "/healthz")
    assert response.status == 200
    host.undeploy(inst.uri)
    assert host.used_slots == 0
    response = transport.request(src="gateway", channel="data", method="GET",
                                 url=inst.uri + "/healthz")
    assert response.status == 404
    with pytest.raises(NotFoundError):
        host.undeploy(inst.uri)


def test_mgmt_wire_surface():
    host, _, transport, _ = build_host()
    response = transport.request(
        src="lcmp", channel="mec-internal", method="POST",
        url="inproc://edge-a/mgmt/v1/deploy",
        body=dumps({"app": app_doc(), "handler": "fn-echo", "shareable": True,
                    "chain_uri": None}),
    )
    uri = loads(raise_for_status(response).body)["uri"]
    assert uri.startswith("inproc://edge-a/apps/fn-echo-")
    for verb, payload in (("attach", {"uri": uri, "context_id": CTX}),
                          ("detach", {"uri": uri, "context_id": CTX}),
                          ("undeploy", {"uri": uri})):
        response = transport.request(
            src="lcmp", channel="mec-internal", method="POST",
            url=f"inproc://edge-a/mgmt/v1/{verb}", body=dumps(payload),
        )
        raise_for_status(response)
    assert host.used_slots == 0


def test_builtin_handlers_reject_bad_sum_input():
    with pytest.raises(ValueError):
        BUILTIN_HANDLERS["fn-sum"](b'{"not": "a list"}')
    with pytest.raises(ValueError):
        BUILTIN_HANDLERS["fn-sum"](b"[1, true, 3]")
