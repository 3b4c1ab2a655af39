"""Diffie-Hellman remote-attestation state machines (challenger and responder).

The forward handshake is a four-message sigma-style exchange over X25519:

  responder                                   challenger
     | -- msg1 {session_id, g_a} -------------->  |
     | <-- msg2 {session_id, g_b, mac_smk} ------ |
     | -- msg3 {session_id, quote, mac_smk} ----> |   quote binds SHA-256(g_a‖g_b‖vk)
     | <-- msg4 {session_id, status} ------------ |

Both sides derive SMK/SK/MK/VK from the shared secret; SMK authenticates the
handshake, SK is the session key in RA-only mode, MK masks the mutual-
attestation payloads, and VK is woven into the quote's report data so the
quote is bound to this exchange.

Mutual attestation extends the tail: instead of a bare msg4 the challenger
sends s_msg4 (nonce + hash of both report bodies + project id, encrypted
under MK, plus its own msg1 opening the reverse handshake). The responder
attests the challenger's enclave in reverse, checks the report hash against
the reverse-attested identity, and answers c_msg4 (nonce + final session key
under MK). ``server_accept_s_msg4`` / ``server_process_s_msg4`` split that
processing across the reverse-attestation round trip.

All six message types have a canonical JSON encoding (``encode_message`` /
``decode_message``): a ``type`` discriminator, hex session ids, and base64
binary fields. That encoding is the wire contract for the HTTP layer and
every client.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import struct
import time
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .enclave import (
    EnclaveHandle,
    EnclaveIdentity,
    PlatformState,
    Quote,
    Report,
    REPORT_DATA_LEN,
    create_report,
    quote_report,
    verify_quote,
)
from .errors import (
    AttestationFailed,
    BindingFailed,
    HandshakeFailed,
    IdentityRejected,
    MutualAttestationFailed,
    ProtocolError,
    UnknownSession,
)

SESSION_ID_LEN = 16
NONCE_LEN = 16
KEY_LEN = 16
MAC_LEN = 16
SESSION_IDLE_TIMEOUT = 300.0  # seconds; idle handshake state is purged


def _rand(rng, n: int) -> bytes:
    return rng.randbytes(n) if rng is not None else os.urandom(n)


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def _unb64(text) -> bytes:
    if not isinstance(text, str):
        raise ProtocolError("expected base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolError(f"bad base64 field: {exc}") from exc


class Role(str, Enum):
    CHALLENGER = "CHALLENGER"
    RESPONDER = "RESPONDER"


class State(str, Enum):
    STARTED = "STARTED"
    MSG1_SENT = "MSG1_SENT"
    MSG2_SENT = "MSG2_SENT"
    MSG3_SENT = "MSG3_SENT"
    ESTABLISHED = "ESTABLISHED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class SessionKeys:
    smk: bytes  # handshake message integrity
    sk: bytes   # session key (RA-only mode)
    mk: bytes   # masking key for s_msg4 / c_msg4 payloads
    vk: bytes   # bound into quote report data


def derive_session_keys(shared_secret: bytes) -> SessionKeys:
    """Derive the four 16-byte handshake keys from one DH shared secret."""
    def one(label: bytes) -> bytes:
        kdf = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=None, info=label)
        return kdf.derive(shared_secret)

    return SessionKeys(smk=one(b"SMK"), sk=one(b"SK"), mk=one(b"MK"), vk=one(b"VK"))


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class Msg1:
    session_id: bytes
    g_a: bytes


@dataclass(frozen=True)
class Msg2:
    session_id: bytes
    g_b: bytes
    mac: bytes


@dataclass(frozen=True)
class Msg3:
    session_id: bytes
    quote: Quote
    mac: bytes


@dataclass(frozen=True)
class Msg4:
    session_id: bytes
    status: str  # "OK" | "REJECTED"


@dataclass(frozen=True)
class SMsg4:
    session_id: bytes
    payload: bytes       # iv ‖ AEAD(mk, nonce ‖ report_hash ‖ len ‖ project_id)
    client_msg1: Msg1    # opens the reverse attestation


@dataclass(frozen=True)
class CMsg4:
    session_id: bytes
    payload: bytes       # iv ‖ AEAD(mk, nonce ‖ sk)


def message_to_dict(msg) -> dict:
    if isinstance(msg, Msg1):
        return {"type": "msg1", "session_id": msg.session_id.hex(), "g_a": _b64(msg.g_a)}
    if isinstance(msg, Msg2):
        return {
            "type": "msg2",
            "session_id": msg.session_id.hex(),
            "g_b": _b64(msg.g_b),
            "mac": _b64(msg.mac),
        }
    if isinstance(msg, Msg3):
        return {
            "type": "msg3",
            "session_id": msg.session_id.hex(),
            "quote": _b64(msg.quote.serialize()),
            "mac": _b64(msg.mac),
        }
    if isinstance(msg, Msg4):
        return {"type": "msg4", "session_id": msg.session_id.hex(), "status": msg.status}
    if isinstance(msg, SMsg4):
        return {
            "type": "s_msg4",
            "session_id": msg.session_id.hex(),
            "payload": _b64(msg.payload),
            "client_msg1": message_to_dict(msg.client_msg1),
        }
    if isinstance(msg, CMsg4):
        return {"type": "c_msg4", "session_id": msg.session_id.hex(), "payload": _b64(msg.payload)}
    raise TypeError(f"not a handshake message: {type(msg)!r}")


def _session_id_from(data: dict) -> bytes:
    try:
        sid = bytes.fromhex(data["session_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError("missing or malformed session_id") from exc
    if len(sid) != SESSION_ID_LEN:
        raise ProtocolError("session_id must be 16 bytes")
    return sid


def message_from_dict(data: dict):
    if not isinstance(data, dict):
        raise ProtocolError("message must be a JSON object")
    kind = data.get("type")
    try:
        if kind == "msg1":
            g_a = _unb64(data["g_a"])
            if len(g_a) != 32:
                raise ProtocolError("g_a must be 32 bytes")
            return Msg1(session_id=_session_id_from(data), g_a=g_a)
        if kind == "msg2":
            g_b = _unb64(data["g_b"])
            if len(g_b) != 32:
                raise ProtocolError("g_b must be 32 bytes")
            return Msg2(session_id=_session_id_from(data), g_b=g_b, mac=_unb64(data["mac"]))
        if kind == "msg3":
            return Msg3(
                session_id=_session_id_from(data),
                quote=Quote.deserialize(_unb64(data["quote"])),
                mac=_unb64(data["mac"]),
            )
        if kind == "msg4":
            status = data.get("status")
            if status not in ("OK", "REJECTED"):
                raise ProtocolError("msg4 status must be OK or REJECTED")
            return Msg4(session_id=_session_id_from(data), status=status)
        if kind == "s_msg4":
            inner = message_from_dict(data["client_msg1"])
            if not isinstance(inner, Msg1):
                raise ProtocolError("client_msg1 must be a msg1")
            return SMsg4(
                session_id=_session_id_from(data),
                payload=_unb64(data["payload"]),
                client_msg1=inner,
            )
        if kind == "c_msg4":
            return CMsg4(session_id=_session_id_from(data), payload=_unb64(data["payload"]))
    except ProtocolError:
        raise
    except KeyError as exc:
        raise ProtocolError(f"missing message field: {exc}") from exc
    except Exception as exc:  # bad lengths, types, nesting
        raise ProtocolError(f"malformed message: {exc}") from exc
    raise ProtocolError(f"unknown message type: {kind!r}")


def encode_message(msg) -> str:
    """Canonical wire form: sorted keys, no whitespace."""
    return json.dumps(message_to_dict(msg), sort_keys=True, separators=(",", ":"))


def decode_message(text: str):
    try:
        data = json.loads(text)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from exc
    return message_from_dict(data)


# ---------------------------------------------------------------- session

@dataclass
class AttestationSession:
    """One side's handshake state. Single-owner: callers serialize access."""

    session_id: bytes
    role: Role
    dh_private: X25519PrivateKey
    g_a: bytes | None = None              # responder's DH public
    g_b: bytes | None = None              # challenger's DH public
    keys: SessionKeys | None = None
    state: State = State.STARTED
    own_report: Report | None = None
    peer_report: Report | None = None
    nonce: bytes | None = None
    project_id: str | None = None
    report_hash: bytes | None = None      # s_msg4 hash stashed server-side
    peer_identity: EnclaveIdentity | None = None   # set after reverse RA
    sk_override: bytes | None = None      # MA-delivered final session key
    reverse: "AttestationSession | None" = None
    created_at: float = field(default_factory=time.time)
    last_used: float = field(default_factory=time.time)

    @property
    def negotiated_sk(self) -> bytes:
        """Final session key: MA-delivered if present, else the DH-derived SK."""
        if self.sk_override is not None:
            return self.sk_override
        if self.keys is None:
            raise ProtocolError("no session key negotiated yet")
        return self.keys.sk

    def touch(self) -> None:
        self.last_used = time.time()

    def fail(self, exc: Exception) -> Exception:
        self.state = State.FAILED
        return exc

    def _require(self, expected: State) -> None:
        if self.state is State.FAILED:
            raise ProtocolError("session already failed")
        if self.state is not expected:
            raise ProtocolError(f"message out of order: state={self.state.value}")

    def binding_report_data(self) -> bytes:
        """SHA-256(g_a ‖ g_b ‖ vk), zero-padded to the 64-byte report_data."""
        digest = hashlib.sha256(self.g_a + self.g_b + self.keys.vk).digest()
        return digest.ljust(REPORT_DATA_LEN, b"\x00")


def _dh_public_bytes(private: X25519PrivateKey) -> bytes:
    return private.public_key().public_bytes_raw()


def _dh_shared(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    try:
        return private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:
        raise ProtocolError(f"invalid DH public value: {exc}") from exc


def _handshake_mac(smk: bytes, data: bytes) -> bytes:
    return hmac.new(smk, data, hashlib.sha256).digest()[:MAC_LEN]


def _new_dh_key(rng) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(_rand(rng, 32))


# ---------------------------------------------------------------- forward RA

def responder_start(enclave: EnclaveHandle, rng=None) -> tuple[AttestationSession, Msg1]:
    """Open a handshake on the attested side; emits msg1 with a fresh DH public."""
    private = _new_dh_key(rng)
    session = AttestationSession(
        session_id=_rand(rng, SESSION_ID_LEN),
        role=Role.RESPONDER,
        dh_private=private,
        g_a=_dh_public_bytes(private),
        state=State.MSG1_SENT,
    )
    return session, Msg1(session_id=session.session_id, g_a=session.g_a)


def challenger_process_msg1(msg1: Msg1, rng=None) -> tuple[AttestationSession, Msg2]:
    """Answer msg1: derive the shared keys and authenticate our DH public."""
    if len(msg1.g_a) != 32:
        raise ProtocolError("g_a must be 32 bytes")
    private = _new_dh_key(rng)
    g_b = _dh_public_bytes(private)
    shared = _dh_shared(private, msg1.g_a)
    session = AttestationSession(
        session_id=msg1.session_id,
        role=Role.CHALLENGER,
        dh_private=private,
        g_a=msg1.g_a,
        g_b=g_b,
        keys=derive_session_keys(shared),
        state=State.MSG2_SENT,
    )
    mac = _handshake_mac(session.keys.smk, g_b + msg1.g_a)
    return session, Msg2(session_id=session.session_id, g_b=g_b, mac=mac)


def responder_process_msg2(
    session: AttestationSession,
    msg2: Msg2,
    enclave: EnclaveHandle,
    platform: PlatformState,
) -> Msg3:
    """Verify msg2, then quote our identity bound to this exchange."""
    if msg2.session_id != session.session_id:
        raise UnknownSession("msg2 references a different session")
    session._require(State.MSG1_SENT)
    shared = _dh_shared(session.dh_private, msg2.g_b)
    session.keys = derive_session_keys(shared)
    session.g_b = msg2.g_b
    expected = _handshake_mac(session.keys.smk, msg2.g_b + session.g_a)
    if not hmac.compare_digest(expected, msg2.mac):
        raise session.fail(HandshakeFailed("msg2 MAC verification failed"))
    report = create_report(enclave, session.binding_report_data())
    quote = quote_report(report, platform)
    session.own_report = report
    session.state = State.MSG3_SENT
    mac = _handshake_mac(session.keys.smk, quote.serialize())
    return Msg3(session_id=session.session_id, quote=quote, mac=mac)


def challenger_process_msg3(
    session: AttestationSession,
    msg3: Msg3,
    authority_public_key: bytes,
    expected_identity=None,
) -> Msg4:
    """Verify the responder's quote, its binding to this session, and the
    caller's identity predicate. Success establishes the session."""
    if msg3.session_id != session.session_id:
        raise UnknownSession("msg3 references a different session")
    session._require(State.MSG2_SENT)
    expected_mac = _handshake_mac(session.keys.smk, msg3.quote.serialize())
    if not hmac.compare_digest(expected_mac, msg3.mac):
        raise session.fail(HandshakeFailed("msg3 MAC verification failed"))
    try:
        identity = verify_quote(msg3.quote, authority_public_key)
    except AttestationFailed as exc:
        raise session.fail(exc)
    if msg3.quote.report.report_data != session.binding_report_data():
        raise session.fail(BindingFailed("quote does not bind this session's DH publics"))
    if expected_identity is not None and not expected_identity(identity):
        raise session.fail(IdentityRejected("responder identity failed the predicate"))
    session.peer_report = msg3.quote.report
    session.state = State.ESTABLISHED
    return Msg4(session_id=session.session_id, status="OK")


def reject_msg4(session: AttestationSession) -> Msg4:
    """The challenger's explicit rejection notice for a failed handshake."""
    return Msg4(session_id=session.session_id, status="REJECTED")


def responder_process_msg4(session: AttestationSession, msg4: Msg4) -> None:
    """Close the responder side of an RA-only handshake."""
    if msg4.session_id != session.session_id:
        raise UnknownSession("msg4 references a different session")
    session._require(State.MSG3_SENT)
    if msg4.status == "OK":
        session.state = State.ESTABLISHED
    else:
        session.fail(HandshakeFailed("challenger rejected the handshake"))


# ---------------------------------------------------------------- mutual attestation

def _mk_encrypt(mk: bytes, plaintext: bytes, rng=None) -> bytes:
    iv = _rand(rng, 12)
    return iv + AESGCM(mk).encrypt(iv, plaintext, None)


def _mk_decrypt(mk: bytes, payload: bytes) -> bytes:
    if len(payload) < 12 + 16:
        raise ProtocolError("masked payload too short")
    try:
        return AESGCM(mk).decrypt(payload[:12], payload[12:], None)
    except InvalidTag as exc:
        raise ProtocolError("masked payload failed to decrypt") from exc


def _expected_report_body(identity, report_data: bytes) -> bytes:
    return Report(identity=identity, report_data=report_data, mac=b"\x00" * 16).body_bytes()


def client_build_s_msg4(
    session: AttestationSession,
    client_enclave: EnclaveHandle,
    project_id: str,
    rng=None,
) -> SMsg4:
    """Build the mutual-attestation request: a fresh nonce, the hash of both
    report bodies (client first), and the tenant/project id, all masked under
    MK; plus our own msg1 so the server can attest us in reverse."""
    if session.role is not Role.CHALLENGER or session.state is not State.ESTABLISHED:
        raise ProtocolError("forward attestation not established")
    if session.peer_report is None:
        raise ProtocolError("no server report retained")
    nonce = _rand(rng, NONCE_LEN)
    session.nonce = nonce
    client_report = create_report(client_enclave, session.binding_report_data())
    session.own_report = client_report
    report_hash = hashlib.sha256(
        client_report.body_bytes() + session.peer_report.body_bytes()
    ).digest()
    project_bytes = project_id.encode("utf-8")
    plaintext = nonce + report_hash + struct.pack(">H", len(project_bytes)) + project_bytes
    reverse_session, client_msg1 = responder_start(client_enclave, rng=rng)
    session.reverse = reverse_session
    return SMsg4(
        session_id=session.session_id,
        payload=_mk_encrypt(session.keys.mk, plaintext, rng=rng),
        client_msg1=client_msg1,
    )


def server_accept_s_msg4(session: AttestationSession, s_msg4: SMsg4) -> Msg1:
    """Unmask and stash the s_msg4 fields; a successful decrypt proves the
    challenger holds the session keys, so the forward handshake is
    established. Returns the embedded msg1 opening the reverse attestation."""
    if s_msg4.session_id != session.session_id:
        raise UnknownSession("s_msg4 references a different session")
    session._require(State.MSG3_SENT)
    plaintext = _mk_decrypt(session.keys.mk, s_msg4.payload)
    if len(plaintext) < NONCE_LEN + 32 + 2:
        raise ProtocolError("s_msg4 payload truncated")
    nonce = plaintext[:NONCE_LEN]
    report_hash = plaintext[NONCE_LEN:NONCE_LEN + 32]
    (plen,) = struct.unpack(">H", plaintext[NONCE_LEN + 32:NONCE_LEN + 34])
    project_bytes = plaintext[NONCE_LEN + 34:]
    if len(project_bytes) != plen:
        raise ProtocolError("s_msg4 project id length mismatch")
    session.nonce = nonce
    session.report_hash = report_hash
    session.project_id = project_bytes.decode("utf-8")
    session.state = State.ESTABLISHED
    return s_msg4.client_msg1


def server_process_s_msg4(
    session: AttestationSession,
    reverse_ra: AttestationSession,
    sk_new: bytes | None = None,
    rng=None,
) -> CMsg4:
    """Finish mutual attestation after the reverse handshake: check the
    report hash against the reverse-attested identity, then deliver the final
    session key (fresh unless the caller supplies one) alongside the nonce."""
    if session.state is not State.ESTABLISHED or session.report_hash is None:
        raise ProtocolError("s_msg4 not accepted on this session")
    if reverse_ra.state is not State.ESTABLISHED or reverse_ra.peer_report is None:
        raise AttestationFailed("reverse attestation of the client did not complete")
    if session.own_report is None:
        raise ProtocolError("no server report retained")
    client_identity = reverse_ra.peer_report.identity
    expected_hash = hashlib.sha256(
        _expected_report_body(client_identity, session.binding_report_data())
        + session.own_report.body_bytes()
    ).digest()
    if not hmac.compare_digest(expected_hash, session.report_hash):
        raise session.fail(
            MutualAttestationFailed("s_msg4 report hash does not match the attested client")
        )
    session.peer_identity = client_identity
    if sk_new is None:
        sk_new = _rand(rng, KEY_LEN)
    session.sk_override = sk_new
    return CMsg4(
        session_id=session.session_id,
        payload=_mk_encrypt(session.keys.mk, session.nonce + sk_new, rng=rng),
    )


def client_process_c_msg4(session: AttestationSession, c_msg4: CMsg4) -> bytes:
    """Match the returned nonce against the one we sent; adopt the new key."""
    if c_msg4.session_id != session.session_id:
        raise UnknownSession("c_msg4 references a different session")
    if session.state is State.FAILED:
        raise ProtocolError("session already failed")
    if session.nonce is None:
        raise ProtocolError("no nonce outstanding on this session")
    plaintext = _mk_decrypt(session.keys.mk, c_msg4.payload)
    if len(plaintext) != NONCE_LEN + KEY_LEN:
        raise ProtocolError("c_msg4 payload has the wrong layout")
    nonce, sk_new = plaintext[:NONCE_LEN], plaintext[NONCE_LEN:]
    if not hmac.compare_digest(nonce, session.nonce):
        raise session.fail(MutualAttestationFailed("c_msg4 nonce does not match"))
    session.sk_override = sk_new
    return sk_new
