"""Simulated key-management pair over a point-to-point quantum link.

Two key-management entities (one per security perimeter) share a single
entropy pool. The master-side entity dispenses fresh keys to its local
application entity; the slave-side entity releases the matching bytes
exactly once per key identifier, after which the material is purged from
storage. Key bytes and identifiers are expanded deterministically from the
pool seed, so identical request transcripts reproduce identical keys.

Rate model: the link produces secret bits continuously at the configured
rate, metered as a cumulative production ledger; `capacity_bits` bounds the
stock a single observation or request may see. Undrawn production is not
forfeited, which keeps conservation exact: dispensed bits never exceed
initial capacity plus rate times elapsed time.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence

from .clock import Clock, SystemClock
from .entropy import make_stream, uuid4_from
from .errors import (
    AlreadyConsumedError,
    BadLengthError,
    InvalidConfigError,
    KeyExhaustedError,
    UnknownKeyIdError,
    UnknownPeerError,
    WrongPeerError,
)
from .transport import Router, Transport, WireRequest, json_response, raise_for_status
from .wire import (
    decode_key_container,
    decode_status,
    dumps,
    encode_key_container,
    encode_status,
    loads,
)

DEFAULT_KEY_LENGTH = 256
DEFAULT_MAX_KEYS_PER_REQUEST = 128

MASTER = "master"
SLAVE = "slave"


@dataclass
class KeyRecord:
    key_id: str
    key_bits: bytes | None  # purged (None) once the slave side has consumed it
    key_length: int
    master_sae: str
    slave_sae: str
    dispensed_at: float
    slave_consumed: bool = False


@dataclass(frozen=True)
class KmeStatus:
    peer_sae: str
    key_length_default: int
    stored_key_count: int
    max_key_per_request: int

    def to_doc(self) -> dict:
        return {
            "peer_sae": self.peer_sae,
            "key_length_default": self.key_length_default,
            "stored_key_count": self.stored_key_count,
            "max_key_per_request": self.max_key_per_request,
        }


class EntropyPool:
    """Shared per-pair randomness budget with rate-limited accrual.

    The pool starts full. Accrual is lazy: callers (dispense, status) invoke
    `accrue` which folds elapsed time into the production ledger. A clock
    regression clamps the step to zero.
    """

    def __init__(self, seed: bytes | None, rate_bits_per_sec: int, capacity_bits: int,
                 clock: Clock | None = None) -> None:
        if capacity_bits <= 0:
            raise InvalidConfigError("capacity_bits must be positive")
        if rate_bits_per_sec < 0:
            raise InvalidConfigError("rate_bits_per_sec must be non-negative")
        self._clock = clock or SystemClock()
        self.rate_bits_per_sec = int(rate_bits_per_sec)
        self.capacity_bits = int(capacity_bits)
        self._produced = float(capacity_bits)  # pool starts full
        self._dispensed = 0
        self._last_accrual = self._clock.now()
        self._bits = make_stream(seed, "qkd-key-material")

    def accrue(self, now: float | None = None) -> int:
        if now is None:
            now = self._clock.now()
        step = max(0.0, now - self._last_accrual)
        self._last_accrual = max(self._last_accrual, now)
        self._produced += self.rate_bits_per_sec * step
        return self.available_bits

    @property
    def available_bits(self) -> int:
        return min(self.capacity_bits, int(self._produced) - self._dispensed)

    @property
    def dispensed_bits(self) -> int:
        return self._dispensed

    @property
    def produced_bits(self) -> int:
        return int(self._produced)

    def require(self, bits: int) -> None:
        """Raise (with a retry hint) unless `bits` are currently available."""
        available = self.accrue()
        if available < bits:
            retry_after = None
            if self.rate_bits_per_sec > 0:
                retry_after = (bits - available) / self.rate_bits_per_sec
            raise KeyExhaustedError(
                f"requested {bits} bits, {available} available", retry_after=retry_after
            )

    def draw(self, bits: int) -> bytes:
        """Consume `bits` from the budget; caller must hold the pair lock."""
        self.require(bits)
        self._dispensed += bits
        return self._bits.read(bits // 8)


class KmePair:
    """Shared state of the two entities terminating one link."""

    def __init__(self, pool: EntropyPool, master_sae: str, slave_sae: str, *,
                 clock: Clock, seed: bytes | None,
                 default_key_length: int = DEFAULT_KEY_LENGTH,
                 max_key_per_request: int = DEFAULT_MAX_KEYS_PER_REQUEST) -> None:
        self.pool = pool
        self.master_sae = master_sae
        self.slave_sae = slave_sae
        self.default_key_length = default_key_length
        self.max_key_per_request = max_key_per_request
        self._clock = clock
        self._ids = make_stream(seed, "qkd-key-id")
        self._records: dict[str, KeyRecord] = {}
        self._lock = threading.RLock()
        self.dispensed_keys = 0
        self.released_keys = 0

    # -- master side ---------------------------------------------------------

    def dispense(self, caller_sae: str, slave_sae: str, key_length: int,
                 count: int) -> list[tuple[str, bytes]]:
        if key_length <= 0 or key_length % 8 != 0:
            raise BadLengthError(f"key length {key_length} is not a positive multiple of 8")
        if count < 1 or count > self.max_key_per_request:
            raise BadLengthError(f"count must be in [1, {self.max_key_per_request}]")
        if caller_sae != self.master_sae or slave_sae != self.slave_sae:
            raise UnknownPeerError(
                f"no master link {caller_sae!r} -> {slave_sae!r} on this entity"
            )
        with self._lock:
            # all-or-nothing: budget checked for the whole batch up front
            self.pool.require(count * key_length)
            out: list[tuple[str, bytes]] = []
            now = self._clock.now()
            for _ in range(count):
                key = self.pool.draw(key_length)
                key_id = uuid4_from(self._ids)
                self._records[key_id] = KeyRecord(
                    key_id=key_id, key_bits=key, key_length=key_length,
                    master_sae=self.master_sae, slave_sae=self.slave_sae,
                    dispensed_at=now,
                )
                out.append((key_id, key))
                self.dispensed_keys += 1
            return out

    # -- slave side ----------------------------------------------------------

    def release(self, caller_sae: str, master_sae: str,
                key_ids: Sequence[str]) -> list[tuple[str, bytes]]:
        if not key_ids:
            raise BadLengthError("key_ids must not be empty")
        with self._lock:
            records = []
            for key_id in key_ids:
                record = self._records.get(key_id)
                if record is None:
                    raise UnknownKeyIdError(f"no key with id {key_id}")
                if record.slave_sae != caller_sae or record.master_sae != master_sae:
                    raise WrongPeerError(f"key {key_id} is not bound to {caller_sae!r}")
                if record.slave_consumed:
                    raise AlreadyConsumedError(f"key {key_id} was already released")
                records.append(record)
            out = []
            for record in records:
                assert record.key_bits is not None
                out.append((record.key_id, record.key_bits))
                record.slave_consumed = True
                record.key_bits = None  # purge: no secret material retained
                self.released_keys += 1
            return out

    # -- shared --------------------------------------------------------------

    def status(self, peer_sae: str, expected_peer: str, key_length: int | None = None) -> KmeStatus:
        if peer_sae != expected_peer:
            raise UnknownPeerError(f"unknown peer {peer_sae!r}")
        length = key_length or self.default_key_length
        if length <= 0 or length % 8 != 0:
            raise BadLengthError(f"key length {length} is not a positive multiple of 8")
        with self._lock:
            available = self.pool.accrue()
        return KmeStatus(
            peer_sae=peer_sae,
            key_length_default=length,
            stored_key_count=available // length,
            max_key_per_request=self.max_key_per_request,
        )

    def holds_material(self, key_id: str) -> bool:
        with self._lock:
            record = self._records.get(key_id)
            return record is not None and record.key_bits is not None

    def record_for(self, key_id: str) -> KeyRecord | None:
        with self._lock:
            return self._records.get(key_id)

    def stats(self) -> dict:
        with self._lock:
            return {
                "dispensed_keys": self.dispensed_keys,
                "released_keys": self.released_keys,
                "dispensed_bits": self.pool.dispensed_bits,
                "produced_bits": self.pool.produced_bits,
                "available_bits": self.pool.available_bits,
            }


class KmeHandle:
    """One entity of a pair: master dispenses, slave releases, both report status."""

    def __init__(self, pair: KmePair, side: str) -> None:
        if side not in (MASTER, SLAVE):
            raise ValueError(f"side must be {MASTER!r} or {SLAVE!r}")
        self.pair = pair
        self.side = side

    @property
    def local_sae(self) -> str:
        return self.pair.master_sae if self.side == MASTER else self.pair.slave_sae

    @property
    def peer_sae(self) -> str:
        return self.pair.slave_sae if self.side == MASTER else self.pair.master_sae

    def get_enc_keys(self, caller_sae: str, slave_sae: str, key_length: int,
                     count: int = 1) -> list[tuple[str, bytes]]:
        if self.side != MASTER:
            raise UnknownPeerError(f"{caller_sae!r} is not registered as master here")
        return self.pair.dispense(caller_sae, slave_sae, key_length, count)

    def get_dec_keys(self, caller_sae: str, master_sae: str,
                     key_ids: Sequence[str]) -> list[tuple[str, bytes]]:
        if self.side != SLAVE:
            raise WrongPeerError(f"{caller_sae!r} is not the release side of this link")
        return self.pair.release(caller_sae, master_sae, key_ids)

    def get_status(self, peer_sae: str, key_length: int | None = None) -> KmeStatus:
        return self.pair.status(peer_sae, self.peer_sae, key_length)


def new_kme_pair(seed: bytes | None, rate_bits_per_sec: int, capacity_bits: int, *,
                 clock: Clock | None = None,
                 master_sae: str = "sae-client", slave_sae: str = "sae-mec",
                 default_key_length: int = DEFAULT_KEY_LENGTH,
                 max_key_per_request: int = DEFAULT_MAX_KEYS_PER_REQUEST,
                 ) -> tuple[KmeHandle, KmeHandle]:
    """Create both ends of a link sharing one full pool. Roles are fixed for life."""
    clock = clock or SystemClock()
    pool = EntropyPool(seed, rate_bits_per_sec, capacity_bits, clock)
    pair = KmePair(pool, master_sae, slave_sae, clock=clock, seed=seed,
                   default_key_length=default_key_length,
                   max_key_per_request=max_key_per_request)
    return KmeHandle(pair, MASTER), KmeHandle(pair, SLAVE)


# ---------------------------------------------------------------------------
# REST surface (server and application-side client)
# ---------------------------------------------------------------------------

class KmeApi:
    """REST routes for one entity, served on behalf of its local application entity.

    Caller identity is implicit: everything inside one security perimeter is
    trusted, so the server acts for its configured local SAE.
    """

    def __init__(self, handle: KmeHandle) -> None:
        self._handle = handle

    def router(self) -> Router:
        router = Router()
        router.add("GET", "/api/v1/keys/{peer}/status", self._status)
        router.add("POST", "/api/v1/keys/{peer}/enc_keys", self._enc_keys)
        router.add("POST", "/api/v1/keys/{peer}/dec_keys", self._dec_keys)
        return router

    def _status(self, request: WireRequest, peer: str):
        key_length = None
        if "size" in request.query:
            try:
                key_length = int(request.query["size"])
            except ValueError:
                raise BadLengthError(f"bad size {request.query['size']!r}")
        status = self._handle.get_status(peer, key_length)
        return json_response(200, loads(encode_status(status.to_doc())))

    def _enc_keys(self, request: WireRequest, peer: str):
        doc = loads(request.body) if request.body else {}
        if not isinstance(doc, dict):
            raise BadLengthError("enc_keys body must be an object")
        number = doc.get("number", 1)
        size = doc.get("size", self._handle.pair.default_key_length)
        if not isinstance(number, int) or not isinstance(size, int):
            raise BadLengthError("number and size must be integers")
        keys = self._handle.get_enc_keys(self._handle.local_sae, peer, size, number)
        return json_response(200, loads(encode_key_container(keys)))

    def _dec_keys(self, request: WireRequest, peer: str):
        doc = loads(request.body) if request.body else {}
        ids_doc = doc.get("key_IDs") if isinstance(doc, dict) else None
        if not isinstance(ids_doc, list) or not ids_doc:
            raise BadLengthError("dec_keys body must hold a non-empty key_IDs array")
        key_ids = []
        for item in ids_doc:
            if not isinstance(item, dict) or "key_ID" not in item:
                raise BadLengthError("key_IDs entries must be objects with key_ID")
            key_ids.append(str(item["key_ID"]))
        keys = self._handle.get_dec_keys(self._handle.local_sae, peer, key_ids)
        return json_response(200, loads(encode_key_container(keys)))


class KmeClient:
    """Application-side client speaking the REST protocol through a transport."""

    def __init__(self, transport: Transport, *, src: str, base_url: str,
                 channel: str) -> None:
        self._transport = transport
        self._src = src
        self._base = base_url.rstrip("/")
        self._channel = channel

    def _request(self, method: str, path: str, body: bytes = b"",
                 query: dict | None = None):
        response = self._transport.request(
            src=self._src, channel=self._channel, method=method,
            url=self._base + path, body=body, query=query,
            headers={"content-type": "application/json"} if body else None,
        )
        return raise_for_status(response)

    def get_enc_keys(self, slave_sae: str, *, size: int, number: int = 1) -> list[tuple[str, bytes]]:
        response = self._request("POST", f"/api/v1/keys/{slave_sae}/enc_keys",
                                 dumps({"number": number, "size": size}))
        container = decode_key_container(response.body)
        return [(entry.key_id, entry.key) for entry in container.keys]

    def get_dec_keys(self, master_sae: str, key_ids: Sequence[str]) -> list[tuple[str, bytes]]:
        response = self._request("POST", f"/api/v1/keys/{master_sae}/dec_keys",
                                 dumps({"key_IDs": [{"key_ID": kid} for kid in key_ids]}))
        container = decode_key_container(response.body)
        return [(entry.key_id, entry.key) for entry in container.keys]

    def get_status(self, peer_sae: str, *, size: int | None = None) -> dict:
        query = {"size": str(size)} if size is not None else None
        response = self._request("GET", f"/api/v1/keys/{peer_sae}/status", query=query)
        return decode_status(response.body)


class LocalKmeClient:
    """Same surface as KmeClient but calling a handle directly (no wire)."""

    def __init__(self, handle: KmeHandle, caller_sae: str | None = None) -> None:
        self._handle = handle
        self._caller = caller_sae or handle.local_sae

    def get_enc_keys(self, slave_sae: str, *, size: int, number: int = 1) -> list[tuple[str, bytes]]:
        return self._handle.get_enc_keys(self._caller, slave_sae, size, number)

    def get_dec_keys(self, master_sae: str, key_ids: Sequence[str]) -> list[tuple[str, bytes]]:
        return self._handle.get_dec_keys(self._caller, master_sae, key_ids)

    def get_status(self, peer_sae: str, *, size: int | None = None) -> dict:
        return self._handle.get_status(peer_sae, size).to_doc()
