"""Secure channel between two application entities.

Protocol: the client advertises cipher suites, the server picks the lowest
common identifier, the client fetches one key from its key-management
entity and announces the key identifier, and payloads then travel as
envelopes carrying (key_ID, cipher_suite, nonce, ciphertext) with no
plaintext. The server side fetches the matching key lazily on the first
envelope that names it. Key identifiers and suite identifiers are not
secret and travel in the clear.

Keys are refreshed per policy: after `max_uses` encryptions or once the
current key is older than `max_age_sec`, the next encryption fetches a
fresh key first. Refresh is atomic per context, so racing encryptions
never consume two keys for one rollover.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .clock import Clock
from .errors import (
    AuthFailureError,
    MalformedError,
    MessageTooLongError,
    NoCommonSuiteError,
    NotFoundError,
    UnknownKeyIdError,
)
from .keystore import KeyStore
from .wire import b64decode, b64encode, dumps, loads

MODE_AEAD = "aead"
MODE_OTP = "one-time-pad"

NONCE_BYTES = 12
_DIR_REQUEST = 0x00
_DIR_RESPONSE = 0x01


@dataclass(frozen=True)
class CipherSuite:
    suite_id: int
    name: str
    key_length: int  # bits
    mode: str

    def __post_init__(self) -> None:
        if self.key_length <= 0 or self.key_length % 8 != 0:
            raise ValueError("key_length must be a positive multiple of 8")
        if self.mode not in (MODE_AEAD, MODE_OTP):
            raise ValueError(f"unknown mode {self.mode!r}")


def default_registry() -> dict[int, CipherSuite]:
    """Built-in suites: 1 = AES-256-GCM, 2 = one-time pad (single use per key)."""
    return {
        1: CipherSuite(suite_id=1, name="aes256-gcm", key_length=256, mode=MODE_AEAD),
        2: CipherSuite(suite_id=2, name="one-time-pad", key_length=2048, mode=MODE_OTP),
    }


def negotiate(offered: Sequence[int], supported: Sequence[int]) -> int:
    """Pick the lowest suite id both sides know; symmetric in its arguments."""
    if not offered or not supported:
        raise ValueError("offered and supported suite lists must be non-empty")
    common = set(offered) & set(supported)
    if not common:
        raise NoCommonSuiteError(f"no common suite in offered={list(offered)}")
    return min(common)


@dataclass(frozen=True)
class RefreshPolicy:
    max_uses: int
    max_age_sec: float

    def __post_init__(self) -> None:
        if self.max_uses < 1:
            raise ValueError("max_uses must be positive")
        if self.max_age_sec <= 0:
            raise ValueError("max_age_sec must be positive")


@dataclass
class SecurityContext:
    client_sae: str
    server_sae: str
    suite: CipherSuite
    current_key_id: str
    policy: RefreshPolicy
    established_at: float  # when the current key was bound
    uses: int = 0
    issued_key_ids: list[str] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)


@dataclass(frozen=True)
class EncryptedEnvelope:
    key_id: str
    suite_id: int
    nonce: bytes
    ciphertext: bytes
    sender_sae: str

    def to_doc(self) -> dict:
        return {
            "key_ID": self.key_id,
            "cipher_suite": self.suite_id,
            "nonce": b64encode(self.nonce),
            "ciphertext": b64encode(self.ciphertext),
            "sender": self.sender_sae,
        }

    def to_bytes(self) -> bytes:
        return dumps(self.to_doc())

    @classmethod
    def from_doc(cls, doc: Mapping) -> "EncryptedEnvelope":
        if not isinstance(doc, Mapping):
            raise MalformedError("envelope must be an object")
        for field_name in ("key_ID", "cipher_suite", "nonce", "ciphertext", "sender"):
            if field_name not in doc:
                raise MalformedError(f"envelope missing field {field_name!r}")
        if not isinstance(doc["cipher_suite"], int):
            raise MalformedError("cipher_suite must be an integer")
        return cls(
            key_id=str(doc["key_ID"]),
            suite_id=doc["cipher_suite"],
            nonce=b64decode(doc["nonce"]),
            ciphertext=b64decode(doc["ciphertext"]),
            sender_sae=str(doc["sender"]),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedEnvelope":
        return cls.from_doc(loads(data))


# ---------------------------------------------------------------------------
# Handshake message codecs
# ---------------------------------------------------------------------------

def encode_client_hello(client_sae: str, suite_ids: Sequence[int]) -> bytes:
    return dumps({"client_sae": client_sae, "cipher_suites": list(suite_ids)})


def decode_client_hello(data: bytes) -> tuple[str, list[int]]:
    doc = loads(data)
    if not isinstance(doc, dict) or not isinstance(doc.get("cipher_suites"), list):
        raise MalformedError("client hello must carry a cipher_suites array")
    suites = doc["cipher_suites"]
    if not all(isinstance(s, int) for s in suites):
        raise MalformedError("cipher_suites must be integers")
    return str(doc.get("client_sae", "")), list(suites)


def encode_server_hello(suite_id: int) -> bytes:
    return dumps({"cipher_suite": suite_id})


def decode_server_hello(data: bytes) -> int:
    doc = loads(data)
    if not isinstance(doc, dict) or not isinstance(doc.get("cipher_suite"), int):
        raise MalformedError("server hello must carry an integer cipher_suite")
    return doc["cipher_suite"]


def encode_key_announce(client_sae: str, key_id: str, suite_id: int) -> bytes:
    return dumps({"client_sae": client_sae, "key_ID": key_id, "cipher_suite": suite_id})


def decode_key_announce(data: bytes) -> tuple[str, str, int]:
    doc = loads(data)
    if not isinstance(doc, dict) or "key_ID" not in doc:
        raise MalformedError("key announce must carry key_ID")
    if not isinstance(doc.get("cipher_suite"), int):
        raise MalformedError("key announce must carry an integer cipher_suite")
    return str(doc.get("client_sae", "")), str(doc["key_ID"]), doc["cipher_suite"]


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def should_refresh(ctx: SecurityContext, now: float) -> bool:
    return ctx.uses >= ctx.policy.max_uses or (now - ctx.established_at) > ctx.policy.max_age_sec


def establish_context(client_sae: str, server_sae: str, offered_suites: Sequence[int],
                      kme, key_store: KeyStore, policy: RefreshPolicy, *,
                      clock: Clock,
                      hello: Callable[[Sequence[int]], int],
                      announce: Callable[[str, int], None] | None = None,
                      registry: Mapping[int, CipherSuite] | None = None,
                      ) -> SecurityContext:
    """Run the full context-creation exchange from the client side.

    `hello` performs the suite negotiation round trip with the server and
    returns the selected suite id; `announce` (optional) tells the server
    which key id the context is bound to. One key is fetched eagerly and
    cached in the caller's key store; the server side fetches its copy
    lazily when the first envelope arrives.
    """
    registry = registry if registry is not None else default_registry()
    suite_id = hello(offered_suites)
    suite = registry.get(suite_id)
    if suite is None:
        raise NoCommonSuiteError(f"server selected unknown suite {suite_id}")
    if suite.mode == MODE_OTP:
        # a pad is never reused, whatever the configured budget says
        policy = replace(policy, max_uses=1)
    keys = kme.get_enc_keys(server_sae, size=suite.key_length, number=1)
    key_id, key_bits = keys[0]
    key_store.put(key_id, key_bits, suite.suite_id)
    if announce is not None:
        announce(key_id, suite.suite_id)
    return SecurityContext(
        client_sae=client_sae, server_sae=server_sae, suite=suite,
        current_key_id=key_id, policy=policy, established_at=clock.now(),
        issued_key_ids=[key_id],
    )


def _request_nonce(counter: int) -> bytes:
    return bytes([_DIR_REQUEST]) + counter.to_bytes(NONCE_BYTES - 1, "big")


def response_nonce(request_nonce: bytes) -> bytes:
    if len(request_nonce) != NONCE_BYTES:
        raise MalformedError("request nonce must be 96 bits")
    return bytes([_DIR_RESPONSE]) + request_nonce[1:]


def _aad(key_id: str, suite_id: int, sender_sae: str) -> bytes:
    return f"{key_id}|{suite_id}|{sender_sae}".encode("utf-8")


def _xor(data: bytes, pad: bytes) -> bytes:
    return (int.from_bytes(data, "big") ^ int.from_bytes(pad, "big")).to_bytes(len(data), "big")


def _pad_slice(key_bits: bytes, size: int, response: bool) -> bytes:
    """One-time-pad bytes for one direction: requests read the pad from the
    front, responses from the back, so the two directions never share bits."""
    if size > len(key_bits):
        raise MessageTooLongError(
            f"message of {size} bytes exceeds the {len(key_bits)}-byte pad"
        )
    return key_bits[len(key_bits) - size:] if response else key_bits[:size]


def _seal(suite: CipherSuite, key_bits: bytes, nonce: bytes, plaintext: bytes,
          aad: bytes, *, response: bool = False) -> bytes:
    if suite.mode == MODE_AEAD:
        return AESGCM(key_bits).encrypt(nonce, plaintext, aad)
    return _xor(plaintext, _pad_slice(key_bits, len(plaintext), response))


def _open(suite: CipherSuite, key_bits: bytes, nonce: bytes, ciphertext: bytes,
          aad: bytes, *, response: bool = False) -> bytes:
    if suite.mode == MODE_AEAD:
        try:
            return AESGCM(key_bits).decrypt(nonce, ciphertext, aad)
        except InvalidTag as exc:
            raise AuthFailureError("envelope failed authentication") from exc
        except ValueError as exc:
            raise MalformedError(f"undecryptable envelope: {exc}") from exc
    return _xor(ciphertext, _pad_slice(key_bits, len(ciphertext), response))


def encrypt(ctx: SecurityContext, plaintext: bytes, key_store: KeyStore, kme, *,
            clock: Clock) -> EncryptedEnvelope:
    """Encrypt under the context's current key, rolling it over first if due."""
    with ctx.lock:
        now = clock.now()
        if should_refresh(ctx, now):
            keys = kme.get_enc_keys(ctx.server_sae, size=ctx.suite.key_length, number=1)
            key_id, key_bits = keys[0]
            key_store.put(key_id, key_bits, ctx.suite.suite_id)
            ctx.current_key_id = key_id
            ctx.uses = 0
            ctx.established_at = now
            ctx.issued_key_ids.append(key_id)
        entry = key_store.get(ctx.current_key_id)
        nonce = _request_nonce(ctx.uses) if ctx.suite.mode == MODE_AEAD else b""
        aad = _aad(ctx.current_key_id, ctx.suite.suite_id, ctx.client_sae)
        ciphertext = _seal(ctx.suite, entry.key_bits, nonce, plaintext, aad)
        ctx.uses += 1
        return EncryptedEnvelope(
            key_id=ctx.current_key_id, suite_id=ctx.suite.suite_id,
            nonce=nonce, ciphertext=ciphertext, sender_sae=ctx.client_sae,
        )


def decrypt(envelope: EncryptedEnvelope, key_store: KeyStore, kme=None,
            master_sae: str | None = None, *, response: bool = False,
            registry: Mapping[int, CipherSuite] | None = None) -> bytes:
    """Open an envelope, fetching-and-caching the key if it is not stored yet.

    With `kme=None` the store is the only key source (used where the caller
    has already resolved the key, or must never fetch). `response` selects
    the reply direction (nonce space and pad half).
    """
    registry = registry if registry is not None else default_registry()
    suite = registry.get(envelope.suite_id)
    if suite is None:
        raise MalformedError(f"unknown cipher suite {envelope.suite_id}")
    try:
        entry = key_store.get(envelope.key_id)
    except NotFoundError:
        if kme is None or master_sae is None:
            raise UnknownKeyIdError(f"key {envelope.key_id} not in store")
        fetched = kme.get_dec_keys(master_sae, [envelope.key_id])
        _, key_bits = fetched[0]
        key_store.put(envelope.key_id, key_bits, envelope.suite_id)
        entry = key_store.get(envelope.key_id)
    if entry.suite_id != envelope.suite_id:
        # stops a cached AEAD key from being replayed through the pad path
        raise AuthFailureError("cipher suite does not match the stored key")
    aad = _aad(envelope.key_id, envelope.suite_id, envelope.sender_sae)
    return _open(suite, entry.key_bits, envelope.nonce, envelope.ciphertext, aad,
                 response=response)


def encrypt_response(request_envelope: EncryptedEnvelope, plaintext: bytes,
                     key_store: KeyStore, sender_sae: str, *,
                     registry: Mapping[int, CipherSuite] | None = None) -> EncryptedEnvelope:
    """Seal a reply under the same key the request used (distinct nonce direction)."""
    registry = registry if registry is not None else default_registry()
    suite = registry.get(request_envelope.suite_id)
    if suite is None:
        raise MalformedError(f"unknown cipher suite {request_envelope.suite_id}")
    try:
        entry = key_store.get(request_envelope.key_id)
    except NotFoundError:
        raise UnknownKeyIdError(f"key {request_envelope.key_id} not in store")
    if entry.suite_id != request_envelope.suite_id:
        raise AuthFailureError("cipher suite does not match the stored key")
    if suite.mode == MODE_OTP:
        # both directions share one pad; they must not overlap
        if len(request_envelope.ciphertext) + len(plaintext) > len(entry.key_bits):
            raise MessageTooLongError("request and reply together exceed the pad")
    nonce = response_nonce(request_envelope.nonce) if suite.mode == MODE_AEAD else b""
    aad = _aad(request_envelope.key_id, request_envelope.suite_id, sender_sae)
    ciphertext = _seal(suite, entry.key_bits, nonce, plaintext, aad, response=True)
    return EncryptedEnvelope(
        key_id=request_envelope.key_id, suite_id=request_envelope.suite_id,
        nonce=nonce, ciphertext=ciphertext, sender_sae=sender_sae,
    )
