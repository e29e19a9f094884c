"""QKD-keyed transparent encryption for edge request/response workloads."""

from .channel import (
    CipherSuite,
    EncryptedEnvelope,
    RefreshPolicy,
    SecurityContext,
    decrypt,
    default_registry,
    encrypt,
    encrypt_response,
    establish_context,
    negotiate,
    should_refresh,
)
from .clock import SimulatedClock, SystemClock
from .control import AppContext, AppInfo, Catalog, CatalogEntry, HostDescriptor, Lcmp, Meo, place_app
from .errors import EdgeQkdError
from .gateway import ClientKeyStore, Gateway, RouteBinding
from .harness import RunMetrics, RunResult, ScenarioConfig, run_scenario, wiretap_assert
from .host import BUILTIN_HANDLERS, MecHost
from .keystore import KeyStore
from .kme import EntropyPool, KmeStatus, new_kme_pair

__version__ = "0.1.0"

__all__ = [
    "AppContext",
    "AppInfo",
    "BUILTIN_HANDLERS",
    "Catalog",
    "CatalogEntry",
    "CipherSuite",
    "ClientKeyStore",
    "EdgeQkdError",
    "EncryptedEnvelope",
    "EntropyPool",
    "Gateway",
    "HostDescriptor",
    "KeyStore",
    "KmeStatus",
    "Lcmp",
    "MecHost",
    "Meo",
    "RefreshPolicy",
    "RouteBinding",
    "RunMetrics",
    "RunResult",
    "ScenarioConfig",
    "SecurityContext",
    "SimulatedClock",
    "SystemClock",
    "decrypt",
    "default_registry",
    "encrypt",
    "encrypt_response",
    "establish_context",
    "negotiate",
    "new_kme_pair",
    "place_app",
    "run_scenario",
    "should_refresh",
    "wiretap_assert",
    "__version__",
]
