"""Deterministic software stand-in for an SGX-style trusted execution environment.

Provides the four primitives the rest of the service builds on:

* **measurement** — loading code under a manifest yields a reproducible
  identity (``mr_enclave`` = SHA-256 of the manifest bytes, ``mr_signer`` =
  SHA-256 of the signer's public key encoding);
* **reports** — an enclave binds 64 bytes of caller data to its identity,
  authenticated by a platform-local MAC key;
* **quotes** — a per-platform quoting authority signs reports so remote
  parties can verify them (the local replacement for a hosted attestation
  service);
* **sealing** — AEAD encryption under a key derived from the platform secret
  and the enclave identity, so only the matching enclave on the same platform
  can recover the plaintext.

Nothing here provides real memory protection; the value is that identities,
key derivations, and failure modes behave like the hardware contract so the
protocols above can be exercised end to end.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import struct
from dataclasses import dataclass
from enum import Enum

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import InvalidArgument, ReportRejected, AttestationFailed, UnsealDenied

REPORT_DATA_LEN = 64
MAC_LEN = 16
CPU_SVN_LEN = 16
SEAL_IKM = b"enclave-seal-key"

# fixed-offset binary layout: report body, full report, quote
REPORT_BODY_LEN = 32 + 32 + 2 + CPU_SVN_LEN + REPORT_DATA_LEN
REPORT_LEN = REPORT_BODY_LEN + MAC_LEN
QUOTE_LEN = REPORT_LEN + 64  # + Ed25519 signature


class SealPolicy(str, Enum):
    BY_MEASUREMENT = "BY_MEASUREMENT"
    BY_SIGNER = "BY_SIGNER"


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class EnclaveIdentity:
    """The unit of trust decisions: what code, signed by whom, at what version."""

    mr_enclave: bytes
    mr_signer: bytes
    isv_svn: int
    cpu_svn: bytes

    def to_dict(self) -> dict:
        return {
            "mr_enclave": self.mr_enclave.hex(),
            "mr_signer": self.mr_signer.hex(),
            "isv_svn": self.isv_svn,
            "cpu_svn": self.cpu_svn.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnclaveIdentity":
        return cls(
            mr_enclave=bytes.fromhex(data["mr_enclave"]),
            mr_signer=bytes.fromhex(data["mr_signer"]),
            isv_svn=int(data["isv_svn"]),
            cpu_svn=bytes.fromhex(data["cpu_svn"]),
        )


@dataclass(frozen=True)
class Report:
    """An enclave identity bound to 64 bytes of report data, MAC'd with the
    platform report key. The MAC only verifies on the producing platform."""

    identity: EnclaveIdentity
    report_data: bytes
    mac: bytes

    def body_bytes(self) -> bytes:
        """Identity fields + report_data, without the platform-local MAC.

        This is the portion a remote party can reconstruct, and the input to
        all report hashes and signatures.
        """
        ident = self.identity
        return (
            ident.mr_enclave
            + ident.mr_signer
            + struct.pack(">H", ident.isv_svn)
            + ident.cpu_svn
            + self.report_data
        )

    def serialize(self) -> bytes:
        return self.body_bytes() + self.mac

    @classmethod
    def deserialize(cls, raw: bytes) -> "Report":
        if len(raw) != REPORT_LEN:
            raise InvalidArgument(f"report must be {REPORT_LEN} bytes, got {len(raw)}")
        mr_enclave = raw[0:32]
        mr_signer = raw[32:64]
        (isv_svn,) = struct.unpack(">H", raw[64:66])
        cpu_svn = raw[66:82]
        report_data = raw[82:146]
        mac = raw[146:162]
        identity = EnclaveIdentity(mr_enclave, mr_signer, isv_svn, cpu_svn)
        return cls(identity=identity, report_data=report_data, mac=mac)


@dataclass(frozen=True)
class Quote:
    """A report plus the quoting authority's signature over its serialization."""

    report: Report
    signature: bytes

    def serialize(self) -> bytes:
        return self.report.serialize() + self.signature

    @classmethod
    def deserialize(cls, raw: bytes) -> "Quote":
        if len(raw) != QUOTE_LEN:
            raise InvalidArgument(f"quote must be {QUOTE_LEN} bytes, got {len(raw)}")
        return cls(report=Report.deserialize(raw[:REPORT_LEN]), signature=raw[REPORT_LEN:])


@dataclass(frozen=True)
class SealedBlob:
    """AEAD output bound to an enclave identity under a seal policy."""

    seal_policy: SealPolicy
    bound_mr_enclave: bytes | None
    bound_mr_signer: bytes | None
    bound_isv_svn: int
    bound_cpu_svn: bytes
    iv: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def to_json(self) -> str:
        return json.dumps(
            {
                "seal_policy": self.seal_policy.value,
                "bound_mr_enclave": self.bound_mr_enclave.hex() if self.bound_mr_enclave else None,
                "bound_mr_signer": self.bound_mr_signer.hex() if self.bound_mr_signer else None,
                "bound_isv_svn": self.bound_isv_svn,
                "bound_cpu_svn": self.bound_cpu_svn.hex(),
                "iv": _b64(self.iv),
                "ciphertext": _b64(self.ciphertext),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SealedBlob":
        data = json.loads(text)
        return cls(
            seal_policy=SealPolicy(data["seal_policy"]),
            bound_mr_enclave=bytes.fromhex(data["bound_mr_enclave"]) if data["bound_mr_enclave"] else None,
            bound_mr_signer=bytes.fromhex(data["bound_mr_signer"]) if data["bound_mr_signer"] else None,
            bound_isv_svn=int(data["bound_isv_svn"]),
            bound_cpu_svn=bytes.fromhex(data["bound_cpu_svn"]),
            iv=_unb64(data["iv"]),
            ciphertext=_unb64(data["ciphertext"]),
        )


class PlatformState:
    """Per-host secrets: seal root, report MAC key, and the quoting authority.

    Two platforms with distinct ``seal_root`` values produce mutually
    unsealable blobs; enclaves measure identically across platforms but seal
    differently, which is what forces admin KEK provisioning on scaled
    deployments.
    """

    def __init__(self, seal_root: bytes, report_key: bytes, authority_private: bytes, cpu_svn: bytes):
        if len(seal_root) != 32 or len(report_key) != 16 or len(cpu_svn) != CPU_SVN_LEN:
            raise InvalidArgument("bad platform field sizes")
        self.seal_root = seal_root
        self.report_key = report_key
        self._authority_key = Ed25519PrivateKey.from_private_bytes(authority_private)
        self.cpu_svn = cpu_svn

    @classmethod
    def generate(cls, rng=None) -> "PlatformState":
        rand = rng.randbytes if rng is not None else os.urandom
        return cls(
            seal_root=rand(32),
            report_key=rand(16),
            authority_private=rand(32),
            cpu_svn=rand(CPU_SVN_LEN),
        )

    @property
    def authority_public_key(self) -> bytes:
        """Raw 32-byte Ed25519 public key of the quoting authority."""
        return self._authority_key.public_key().public_bytes_raw()

    def _authority_private_bytes(self) -> bytes:
        return self._authority_key.private_bytes_raw()

    def sign_report(self, report_bytes: bytes) -> bytes:
        return self._authority_key.sign(report_bytes)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seal_root": _b64(self.seal_root),
                "report_key": _b64(self.report_key),
                "authority_private_key": _b64(self._authority_private_bytes()),
                "authority_public_key": _b64(self.authority_public_key),
                "cpu_svn": _b64(self.cpu_svn),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PlatformState":
        data = json.loads(text)
        return cls(
            seal_root=_unb64(data["seal_root"]),
            report_key=_unb64(data["report_key"]),
            authority_private=_unb64(data["authority_private_key"]),
            cpu_svn=_unb64(data["cpu_svn"]),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "PlatformState":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class EnclaveHandle:
    """A loaded enclave: its identity plus the platform it runs on."""

    identity: EnclaveIdentity
    platform: PlatformState


def load_enclave(
    manifest: bytes,
    signer_public_key: bytes,
    isv_svn: int,
    platform: PlatformState,
) -> EnclaveHandle:
    """Measure ``manifest`` and instantiate an enclave on ``platform``.

    The measurement is SHA-256 over the raw manifest bytes; the signer
    identity is SHA-256 over the signer public key encoding. Loading the same
    inputs always yields the same identity.
    """
    if not manifest:
        raise InvalidArgument("manifest must be non-empty")
    if not (0 <= isv_svn <= 0xFFFF):
        raise InvalidArgument("isv_svn out of range")
    identity = EnclaveIdentity(
        mr_enclave=hashlib.sha256(manifest).digest(),
        mr_signer=hashlib.sha256(signer_public_key).digest(),
        isv_svn=isv_svn,
        cpu_svn=platform.cpu_svn,
    )
    return EnclaveHandle(identity=identity, platform=platform)


def _report_mac(platform: PlatformState, body: bytes) -> bytes:
    return hmac.new(platform.report_key, body, hashlib.sha256).digest()[:MAC_LEN]


def create_report(enclave: EnclaveHandle, report_data: bytes) -> Report:
    """Bind ``report_data`` (exactly 64 bytes) to the enclave identity."""
    if len(report_data) != REPORT_DATA_LEN:
        raise InvalidArgument(f"report_data must be exactly {REPORT_DATA_LEN} bytes")
    unmacd = Report(identity=enclave.identity, report_data=report_data, mac=b"\x00" * MAC_LEN)
    return Report(
        identity=enclave.identity,
        report_data=report_data,
        mac=_report_mac(enclave.platform, unmacd.body_bytes()),
    )


def verify_report_mac(report: Report, platform: PlatformState) -> bool:
    return hmac.compare_digest(report.mac, _report_mac(platform, report.body_bytes()))


def quote_report(report: Report, platform: PlatformState) -> Quote:
    """Sign a locally produced report. Reports from other platforms are refused."""
    if not verify_report_mac(report, platform):
        raise ReportRejected("report MAC does not verify on this platform")
    return Quote(report=report, signature=platform.sign_report(report.serialize()))


def verify_quote(quote: Quote, authority_public_key: bytes) -> EnclaveIdentity:
    """Return the embedded identity iff the authority signature verifies."""
    try:
        Ed25519PublicKey.from_public_bytes(authority_public_key).verify(
            quote.signature, quote.report.serialize()
        )
    except (InvalidSignature, ValueError) as exc:
        raise AttestationFailed("quote signature verification failed") from exc
    return quote.report.identity


def _seal_key(enclave: EnclaveHandle, policy: SealPolicy) -> bytes:
    ident = enclave.identity
    selected = ident.mr_enclave if policy is SealPolicy.BY_MEASUREMENT else ident.mr_signer
    info = policy.value.encode() + selected + struct.pack(">H", ident.isv_svn) + ident.cpu_svn
    kdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=enclave.platform.seal_root, info=info)
    return kdf.derive(SEAL_IKM)


def seal(enclave: EnclaveHandle, plaintext: bytes, policy: SealPolicy = SealPolicy.BY_MEASUREMENT) -> SealedBlob:
    """Encrypt ``plaintext`` so only a matching enclave on this platform can recover it."""
    key = _seal_key(enclave, policy)
    iv = os.urandom(12)
    ciphertext = AESGCM(key).encrypt(iv, plaintext, None)
    ident = enclave.identity
    return SealedBlob(
        seal_policy=policy,
        bound_mr_enclave=ident.mr_enclave if policy is SealPolicy.BY_MEASUREMENT else None,
        bound_mr_signer=ident.mr_signer if policy is SealPolicy.BY_SIGNER else None,
        bound_isv_svn=ident.isv_svn,
        bound_cpu_svn=ident.cpu_svn,
        iv=iv,
        ciphertext=ciphertext,
    )


def unseal(enclave: EnclaveHandle, blob: SealedBlob) -> bytes:
    """Recover sealed plaintext; any identity/platform mismatch or corruption denies."""
    ident = enclave.identity
    if blob.seal_policy is SealPolicy.BY_MEASUREMENT and blob.bound_mr_enclave != ident.mr_enclave:
        raise UnsealDenied("sealed to a different measurement")
    if blob.seal_policy is SealPolicy.BY_SIGNER and blob.bound_mr_signer != ident.mr_signer:
        raise UnsealDenied("sealed to a different signer")
    key = _seal_key(enclave, blob.seal_policy)
    try:
        return AESGCM(key).decrypt(blob.iv, blob.ciphertext, None)
    except InvalidTag as exc:
        raise UnsealDenied("seal key mismatch or corrupted blob") from exc


def derive_seal_material(enclave: EnclaveHandle) -> bytes:
    """Key material other components may derive from (measurement policy)."""
    return _seal_key(enclave, SealPolicy.BY_MEASUREMENT)
