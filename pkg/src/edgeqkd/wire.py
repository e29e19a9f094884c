"""Wire formats for the key-delivery REST protocol.

Single source of truth for the key-container, status, and error JSON bodies
exchanged between key-management servers and their application-side clients.
Encoding is canonical (fixed field order, compact separators) so equal values
always serialize to identical bytes; decoding tolerates unknown extra fields
but is strict about missing or ill-typed required ones.
"""

from __future__ import annotations

import base64
import binascii
import json
import uuid
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .errors import MalformedError


def dumps(obj: Any) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def loads(data: bytes | str) -> Any:
    try:
        return json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedError(f"invalid JSON: {exc}") from exc


def b64encode(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def b64decode(text: str) -> bytes:
    if not isinstance(text, str):
        raise MalformedError("expected base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedError(f"invalid base64: {exc}") from exc


def _require_uuid(value: Any) -> str:
    if not isinstance(value, str):
        raise MalformedError("key_ID must be a string")
    try:
        return str(uuid.UUID(value))
    except ValueError as exc:
        raise MalformedError(f"invalid key_ID {value!r}") from exc


@dataclass(frozen=True)
class KeyEntry:
    key_id: str
    key: bytes


@dataclass(frozen=True)
class KeyContainer:
    keys: tuple[KeyEntry, ...]


def encode_key_container(pairs: Iterable[tuple[str, bytes]]) -> bytes:
    entries = [{"key_ID": key_id, "key": b64encode(key)} for key_id, key in pairs]
    if not entries:
        raise ValueError("key container requires at least one key")
    return dumps({"keys": entries})


def decode_key_container(data: bytes | str) -> KeyContainer:
    doc = loads(data)
    if not isinstance(doc, dict) or not isinstance(doc.get("keys"), list):
        raise MalformedError("key container must hold a 'keys' array")
    entries = []
    for item in doc["keys"]:
        if not isinstance(item, dict):
            raise MalformedError("key container entries must be objects")
        if "key_ID" not in item or "key" not in item:
            raise MalformedError("key container entry missing key_ID or key")
        entries.append(KeyEntry(key_id=_require_uuid(item["key_ID"]), key=b64decode(item["key"])))
    if not entries:
        raise MalformedError("key container must not be empty")
    return KeyContainer(keys=tuple(entries))


STATUS_FIELDS = ("peer_sae", "key_length_default", "stored_key_count", "max_key_per_request")


def encode_status(status: Mapping[str, Any]) -> bytes:
    missing = [f for f in STATUS_FIELDS if f not in status]
    if missing:
        raise ValueError(f"status missing fields: {missing}")
    return dumps({field: status[field] for field in STATUS_FIELDS})


def decode_status(data: bytes | str) -> dict[str, Any]:
    doc = loads(data)
    if not isinstance(doc, dict):
        raise MalformedError("status body must be an object")
    out: dict[str, Any] = {}
    for field in STATUS_FIELDS:
        if field not in doc:
            raise MalformedError(f"status missing field {field!r}")
        out[field] = doc[field]
    return out


def encode_error(code: str, message: str) -> bytes:
    return dumps({"message": message, "code": code})


def decode_error(data: bytes | str) -> tuple[str, str]:
    """Best-effort parse of an error body; unparseable bodies degrade gracefully."""
    try:
        doc = loads(data)
    except MalformedError:
        return "internal-error", data.decode("utf-8", "replace") if isinstance(data, bytes) else str(data)
    if isinstance(doc, dict):
        return str(doc.get("code", "internal-error")), str(doc.get("message", ""))
    return "internal-error", str(doc)
