"""Client library for the three client classes plus the admin flow.

* LEGACY — v1 endpoints, token header, plaintext payloads (the legacy trust
  model: the server may still encrypt at rest, the client cannot tell).
* AWARE — attests the server (RA), pins its identity, and encrypts every
  secret under the negotiated session key before it leaves the process.
* ENABLED — additionally runs a local enclave and completes mutual
  attestation; the final session key is the one the server delivers in
  c_msg4.
* ADMIN — RA with the admin token, then provisions the KEK over the session.

The sticky cookie from the first handshake response rides on the underlying
HTTP session automatically, keeping every handshake call on one instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import requests

from . import attestation as att
from . import wire
from .core import decrypt_under_sk, encrypt_under_sk
from .enclave import EnclaveHandle, EnclaveIdentity
from .errors import (
    AccessDenied,
    AttestationFailed,
    AttestationRequired,
    BadCiphertext,
    IdentityRejected,
    IntegrityViolation,
    KekExists,
    KekMissing,
    KmsError,
    MutualAttestationFailed,
    NotFound,
    PolicyNotAllowed,
    ProtocolError,
    ProvisioningFailed,
    SessionBusy,
    TransportError,
    UnknownSession,
)

_ERROR_BY_CODE = {
    "invalid-argument": ProtocolError,
    "protocol-error": ProtocolError,
    "bad-ciphertext": BadCiphertext,
    "handshake-failed": ProtocolError,
    "binding-failed": ProtocolError,
    "provisioning-failed": ProvisioningFailed,
    "identity-rejected": IdentityRejected,
    "attestation-failed": AttestationFailed,
    "mutual-attestation-failed": MutualAttestationFailed,
    "access-denied": AccessDenied,
    "policy-not-allowed": PolicyNotAllowed,
    "not-found": NotFound,
    "unknown-session": UnknownSession,
    "kek-exists": KekExists,
    "session-busy": SessionBusy,
    "integrity-violation": IntegrityViolation,
    "attestation-required": AttestationRequired,
    "kek-missing": KekMissing,
}

MODES = ("LEGACY", "AWARE", "ENABLED", "ADMIN")


@dataclass
class ClientProfile:
    mode: str
    server_url: str
    token: str
    project_id: str
    authority_key: bytes | None = None          # server quoting authority (raw Ed25519)
    expected_mr_enclave: bytes | None = None
    expected_mr_signer: bytes | None = None
    local_enclave: EnclaveHandle | None = None  # ENABLED only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown client mode {self.mode!r}")
        if self.mode == "ENABLED" and self.local_enclave is None:
            raise ValueError("ENABLED mode requires a local enclave")

    def identity_predicate(self):
        if self.expected_mr_enclave is None and self.expected_mr_signer is None:
            return None

        def predicate(identity: EnclaveIdentity) -> bool:
            if self.expected_mr_enclave is not None and identity.mr_enclave != self.expected_mr_enclave:
                return False
            if self.expected_mr_signer is not None and identity.mr_signer != self.expected_mr_signer:
                return False
            return True

        return predicate


@dataclass
class ClientSession:
    """An established session as the client sees it."""

    session_id: str
    sk: bytes
    mode: str
    server_identity: EnclaveIdentity | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "session_id": self.session_id,
                "sk": wire.b64(self.sk),
                "mode": self.mode,
                "server_identity": self.server_identity.to_dict() if self.server_identity else None,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ClientSession":
        data = json.loads(text)
        return cls(
            session_id=data["session_id"],
            sk=wire.unb64(data["sk"]),
            mode=data["mode"],
            server_identity=EnclaveIdentity.from_dict(data["server_identity"])
            if data.get("server_identity")
            else None,
        )


class KmsClient:
    def __init__(self, profile: ClientProfile, wire_capture: list | None = None):
        self.profile = profile
        self.http = requests.Session()
        self.wire_capture = wire_capture  # append (method, path, request_bytes, response_bytes)

    # -- transport -------------------------------------------------------

    def _request(self, method: str, path: str, body: dict | None = None, token: bool = False) -> dict:
        url = self.profile.server_url.rstrip("/") + path
        headers = {}
        if token:
            headers["X-Auth-Token"] = self.profile.token
        data = json.dumps(body).encode("utf-8") if body is not None else None
        if data is not None:
            headers["Content-Type"] = "application/json"
        try:
            response = self.http.request(method, url, data=data, headers=headers, timeout=60)
        except requests.RequestException as exc:
            raise TransportError(f"{method} {path}: {exc}") from exc
        if self.wire_capture is not None:
            self.wire_capture.append((method, path, data or b"", response.content))
        try:
            payload = response.json()
        except ValueError as exc:
            raise TransportError(f"{method} {path}: unreadable response") from exc
        if response.status_code >= 400:
            code = payload.get("error", "error")
            detail = payload.get("detail", "")
            if response.status_code == 401:
                raise AccessDenied("unauthorized", detail or "unknown token")
            exc_type = _ERROR_BY_CODE.get(code)
            if exc_type is AccessDenied:
                raise AccessDenied(payload.get("reason", code), detail)
            if exc_type is not None:
                raise exc_type(f"{detail} (HTTP {response.status_code})")
            raise TransportError(f"{method} {path}: HTTP {response.status_code} {code} {detail}")
        return payload

    # -- legacy (v1) -------------------------------------------------------

    def legacy_store(self, name: str, plaintext: bytes, content_type: str = "application/octet-stream") -> str:
        body = {"payload": wire.b64(plaintext), "name": name, "content_type": content_type}
        return self._request("POST", "/v1/secrets", body, token=True)["secret_ref"]

    def legacy_get(self, ref: str) -> bytes:
        payload = self._request("GET", f"/v1/secrets/{ref}", token=True)
        return wire.unb64(payload["payload"])

    # -- attestation -------------------------------------------------------

    def attest(self) -> ClientSession:
        """Run RA (AWARE/ADMIN) or full MA (ENABLED) against the server."""
        if self.profile.mode == "LEGACY":
            raise ProtocolError("legacy clients do not attest")
        opened = self._request("POST", "/v2/attest/start", {}, token=True)
        msg1 = att.message_from_dict(opened["msg1"])
        session, msg2 = att.challenger_process_msg1(msg1)
        answer = self._request("POST", "/v2/attest/msg2", {"msg2": att.message_to_dict(msg2)})
        msg3 = att.message_from_dict(answer["msg3"])
        if self.profile.authority_key is None:
            raise AttestationFailed("no quoting authority key configured")
        try:
            att.challenger_process_msg3(
                session, msg3, self.profile.authority_key, self.profile.identity_predicate()
            )
        except KmsError:
            try:
                self._request(
                    "POST", "/v2/attest/msg4", {"msg4": att.message_to_dict(att.reject_msg4(session))}
                )
            except KmsError:
                pass
            raise
        if self.profile.mode == "ENABLED":
            return self._finish_ma(session)
        self._request(
            "POST",
            "/v2/attest/msg4",
            {"msg4": att.message_to_dict(att.Msg4(session_id=session.session_id, status="OK"))},
        )
        return ClientSession(
            session_id=session.session_id.hex(),
            sk=session.negotiated_sk,
            mode="RA",
            server_identity=session.peer_report.identity,
        )

    def _finish_ma(self, session: att.AttestationSession) -> ClientSession:
        enclave = self.profile.local_enclave
        s_msg4 = att.client_build_s_msg4(session, enclave, self.profile.project_id)
        answer = self._request("POST", "/v2/attest/msg4", {"s_msg4": att.message_to_dict(s_msg4)})
        reverse_msg2 = att.message_from_dict(answer["msg2"])
        if not isinstance(reverse_msg2, att.Msg2):
            raise ProtocolError("server did not open the reverse attestation")
        reverse_msg3 = att.responder_process_msg2(
            session.reverse, reverse_msg2, enclave, enclave.platform
        )
        answer = self._request(
            "POST",
            "/v2/attest/ma_msg3",
            {"session_id": session.session_id.hex(), "msg3": att.message_to_dict(reverse_msg3)},
        )
        c_msg4 = att.message_from_dict(answer["c_msg4"])
        if not isinstance(c_msg4, att.CMsg4):
            raise ProtocolError("expected a c_msg4")
        sk = att.client_process_c_msg4(session, c_msg4)
        return ClientSession(
            session_id=session.session_id.hex(),
            sk=sk,
            mode="MA",
            server_identity=session.peer_report.identity,
        )

    # -- data plane ----------------------------------------------------------

    def set_policy(self, session: ClientSession, policy: int, child_mrenclaves: list[bytes]) -> None:
        self._request(
            "POST",
            "/v2/policy",
            {
                "session_id": session.session_id,
                "policy": policy,
                "child_mrenclaves": [m.hex() for m in child_mrenclaves],
            },
        )

    def store_secret(
        self,
        session: ClientSession,
        name: str,
        plaintext: bytes,
        acl: dict | None = None,
        content_type: str = "application/octet-stream",
    ) -> str:
        """Encrypt under the session key and store; optionally set the project
        ACL (policy number + child measurements) first."""
        if acl:
            self.set_policy(session, acl["policy"], acl.get("child_mrenclaves", []))
        body = {
            "session_id": session.session_id,
            "sk_secret": wire.b64(encrypt_under_sk(session.sk, plaintext)),
            "name": name,
            "content_type": content_type,
        }
        return self._request("POST", "/v2/secrets", body)["secret_ref"]

    def get_secret(self, session: ClientSession, ref: str) -> bytes:
        payload = self._request("GET", f"/v2/secrets/{ref}?session_id={session.session_id}")
        return decrypt_under_sk(session.sk, wire.unb64(payload["sk_secret"]))

    # -- admin ----------------------------------------------------------------

    def provision_kek(self, session: ClientSession, kek: bytes, overwrite: bool = False) -> None:
        if self.profile.mode != "ADMIN":
            raise ProtocolError("KEK provisioning requires admin mode")
        body = {
            "session_id": session.session_id,
            "sk_kek": wire.b64(encrypt_under_sk(session.sk, kek)),
            "overwrite": overwrite,
        }
        self._request("POST", "/v2/kek", body)

    def health(self) -> dict:
        return self._request("GET", "/health")
