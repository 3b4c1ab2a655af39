"""Key-management service with simulated-enclave attestation.

A software enclave provides measurement, sealing, and quoting; attestation-
gated REST protocols negotiate session keys; the trusted core enforces
identity-based access policies over an AAD-bound database; and a cluster
harness demonstrates stateless horizontal scaling behind a sticky load
balancer.
"""

__version__ = "0.1.0"

from .enclave import (  # noqa: F401
    EnclaveHandle,
    EnclaveIdentity,
    PlatformState,
    Quote,
    Report,
    SealedBlob,
    SealPolicy,
    load_enclave,
    create_report,
    quote_report,
    verify_quote,
    seal,
    unseal,
)
from .errors import KmsError  # noqa: F401
