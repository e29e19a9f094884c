"""Error taxonomy shared by every component.

Each error carries a stable symbolic code. The code travels verbatim in wire
error bodies ({"message": ..., "code": ...}) and maps onto one HTTP status,
so in-process and HTTP deployments fail identically.
"""

from __future__ import annotations

CODE_REGISTRY: dict[str, type["EdgeQkdError"]] = {}


class EdgeQkdError(Exception):
    """Base error. Subclasses pin `code` (wire name) and `http_status`."""

    code = "internal-error"
    http_status = 500

    def __init__(self, message: str = "", *, retry_after: float | None = None) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.retry_after = retry_after

    def __init_subclass__(cls, **kwargs) -> None:
        super().__init_subclass__(**kwargs)
        CODE_REGISTRY[cls.code] = cls


class InvalidConfigError(EdgeQkdError):
    code = "config-invalid"
    http_status = 400


class KeyExhaustedError(EdgeQkdError):
    code = "key-exhausted"
    http_status = 503


class UnknownPeerError(EdgeQkdError):
    code = "unknown-peer"
    http_status = 404


class BadLengthError(EdgeQkdError):
    code = "bad-length"
    http_status = 400


class UnknownKeyIdError(EdgeQkdError):
    code = "unknown-key-id"
    http_status = 404


class AlreadyConsumedError(EdgeQkdError):
    code = "already-consumed"
    http_status = 410


class WrongPeerError(EdgeQkdError):
    code = "wrong-peer"
    http_status = 403


class NoCommonSuiteError(EdgeQkdError):
    code = "no-common-suite"
    http_status = 409


class MessageTooLongError(EdgeQkdError):
    code = "message-too-long"
    http_status = 400


class AuthFailureError(EdgeQkdError):
    code = "auth-failure"
    http_status = 502


class NotFoundError(EdgeQkdError):
    code = "not-found"
    http_status = 404


class AppNotFoundError(EdgeQkdError):
    code = "app-not-found"
    http_status = 404


class CapacityExhaustedError(EdgeQkdError):
    code = "capacity-exhausted"
    http_status = 503


class UnknownContextError(EdgeQkdError):
    code = "unknown-context"
    http_status = 404


class ContextDeletedError(EdgeQkdError):
    code = "context-deleted"
    http_status = 410


class NoRouteError(EdgeQkdError):
    code = "no-route"
    http_status = 404


class PeerUnreachableError(EdgeQkdError):
    code = "peer-unreachable"
    http_status = 502


class MalformedError(EdgeQkdError):
    code = "malformed"
    http_status = 400


class DuplicateIdError(EdgeQkdError):
    code = "duplicate-id"
    http_status = 409


class HandlerError(EdgeQkdError):
    code = "handler-error"
    http_status = 500


class UnknownAppImageError(EdgeQkdError):
    code = "unknown-app-image"
    http_status = 404


class UnauthorizedError(EdgeQkdError):
    code = "unauthorized"
    http_status = 401


def error_for_code(code: str, message: str = "", *, retry_after: float | None = None) -> EdgeQkdError:
    """Rebuild the typed error for a wire code (unknown codes degrade to the base class)."""
    cls = CODE_REGISTRY.get(code, EdgeQkdError)
    err = cls(message, retry_after=retry_after)
    if cls is EdgeQkdError and code:
        err.code = code  # preserve foreign codes verbatim
    return err
