"""Exception types shared across the service.

Every failure the protocol or the trusted core can signal maps to one
exception class here; the HTTP layer translates them to status codes and the
CLI to exit codes. Handlers should catch ``KmsError`` subclasses, never bare
``Exception``.
"""


class KmsError(Exception):
    """Base class for all service errors."""

    code = "error"


class InvalidArgument(KmsError):
    code = "invalid-argument"


class ReportRejected(KmsError):
    """Quoting authority refused a report whose MAC does not verify."""

    code = "report-rejected"


class AttestationFailed(KmsError):
    """Quote signature or reverse attestation did not verify."""

    code = "attestation-failed"


class BindingFailed(KmsError):
    """Quote report_data does not bind the session's DH publics."""

    code = "binding-failed"


class IdentityRejected(KmsError):
    """Attested identity failed the caller's identity predicate."""

    code = "identity-rejected"


class HandshakeFailed(KmsError):
    """Message authentication failure mid-handshake; session is dead."""

    code = "handshake-failed"


class UnknownSession(KmsError):
    code = "unknown-session"


class SessionBusy(KmsError):
    """A message for this session is already being processed."""

    code = "session-busy"


class ProtocolError(KmsError):
    """Malformed, out-of-order, or undecryptable protocol message."""

    code = "protocol-error"


class MutualAttestationFailed(KmsError):
    """Report-hash or nonce check failed during mutual attestation."""

    code = "mutual-attestation-failed"


class UnsealDenied(KmsError):
    """Sealed blob does not belong to this enclave/platform, or is corrupt."""

    code = "unseal-denied"


class ProvisioningFailed(KmsError):
    code = "provisioning-failed"


class KekExists(KmsError):
    code = "kek-exists"


class KekMissing(KmsError):
    code = "kek-missing"


class PolicyNotAllowed(KmsError):
    """Requested policy number is not available to this attestation mode."""

    code = "policy-not-allowed"


class IntegrityViolation(KmsError):
    """AEAD authentication failed on a stored record (tampered database)."""

    code = "integrity-violation"


class BadCiphertext(KmsError):
    """Client-supplied ciphertext failed to decrypt under the session key."""

    code = "bad-ciphertext"


class AccessDenied(KmsError):
    """Policy check denied the request; ``reason`` is machine-readable."""

    code = "access-denied"

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class AttestationRequired(KmsError):
    """The secret's mode demands a fresh attested identity the caller lacks."""

    code = "attestation-required"


class NotFound(KmsError):
    code = "not-found"


class StoreError(KmsError):
    code = "io-error"


class TransportError(KmsError):
    """Client-side: server unreachable or returned an unreadable response."""

    code = "transport-error"
