"""The trusted core: every plaintext key or secret exists only inside these
operations.

Responsibilities:

* KEK lifecycle — derived from the seal key (single-instance mode) or
  provisioned by an admin over an attested channel, and always persisted
  sealed to the enclave measurement so it survives restarts on the same
  platform and nothing else;
* session-key persistence — established session keys are encrypted under the
  KEK with AAD = project id, so a database row copied between projects fails
  authentication on decrypt;
* policy enforcement — three access policies over enclave identities plus a
  version floor (requester ISV_SVN must be at least the owner's);
* the ciphertext transformations between the wire key (SK) and the at-rest
  key (KEK).

Record JSON schemas are documented field-by-field in the README so tamper
tests can edit the store directly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .enclave import (
    EnclaveHandle,
    EnclaveIdentity,
    SealedBlob,
    SealPolicy,
    derive_seal_material,
    seal,
    unseal,
)
from .errors import (
    AccessDenied,
    AttestationRequired,
    BadCiphertext,
    IntegrityViolation,
    InvalidArgument,
    KekExists,
    KekMissing,
    NotFound,
    PolicyNotAllowed,
    ProvisioningFailed,
    UnsealDenied,
)
from .store import Store
from . import wire

KEK_LEN = 32
SK_LEN = 16
REF_ID_LEN = 16

POLICY_MEASUREMENT = 1  # requester measurement must equal the owner's
POLICY_SIGNER = 2       # requester signer must equal the owner's
POLICY_ACL = 3          # requester measurement must be in the owner's child list

DENY_MEASUREMENT = "measurement-mismatch"
DENY_SIGNER = "signer-mismatch"
DENY_ACL = "not-in-acl"
DENY_SVN = "svn-downgrade"
DENY_CROSS_PROJECT = "cross-project"


# ------------------------------------------------------------- AEAD helpers

def aead_encrypt(key: bytes, plaintext: bytes, aad: bytes | None = None) -> bytes:
    """iv(12) ‖ ciphertext+tag under AES-GCM."""
    iv = os.urandom(12)
    return iv + AESGCM(key).encrypt(iv, plaintext, aad)


def aead_decrypt(key: bytes, payload: bytes, aad: bytes | None = None) -> bytes:
    if len(payload) < 12 + 16:
        raise InvalidTag("payload too short")
    return AESGCM(key).decrypt(payload[:12], payload[12:], aad)


def encrypt_under_sk(sk: bytes, plaintext: bytes) -> bytes:
    """Wire-layer protection: SK_SECRET / SK_KEK framing."""
    return aead_encrypt(sk, plaintext)


def decrypt_under_sk(sk: bytes, payload: bytes) -> bytes:
    try:
        return aead_decrypt(sk, payload)
    except InvalidTag as exc:
        raise BadCiphertext("payload failed to decrypt under the session key") from exc


# ------------------------------------------------------------- record types

@dataclass
class KekState:
    """The at-rest master key. Never leaves the core except sealed or SK-wrapped."""

    kek: bytes
    sealed_form: SealedBlob
    provisioned_by: str  # "ADMIN_RA" | "SEAL_DERIVED"
    hierarchy: bool = False  # treat as master KEK, derive per-project keys

    def project_key(self, project_id: str) -> bytes:
        if not self.hierarchy:
            return self.kek
        kdf = HKDF(
            algorithm=hashes.SHA256(),
            length=KEK_LEN,
            salt=None,
            info=b"project-kek:" + project_id.encode("utf-8"),
        )
        return kdf.derive(self.kek)


@dataclass
class ProjectPolicyRecord:
    """Per-project policy row: owner identity, ACL, and the AAD-bound session key."""

    project_id: str
    policy_no: int
    owner: EnclaveIdentity | None
    child_mr_enclaves: list[bytes]
    enc_sk: bytes           # AEAD under KEK, AAD = project_id bytes
    origin_mode: str        # "RA" | "MA"

    def to_json(self) -> str:
        return json.dumps(
            {
                "project_id": self.project_id,
                "policy_no": self.policy_no,
                "owner": self.owner.to_dict() if self.owner else None,
                "child_mr_enclaves": [m.hex() for m in self.child_mr_enclaves],
                "enc_sk": wire.b64(self.enc_sk),
                "origin_mode": self.origin_mode,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ProjectPolicyRecord":
        data = json.loads(text)
        return cls(
            project_id=data["project_id"],
            policy_no=int(data["policy_no"]),
            owner=EnclaveIdentity.from_dict(data["owner"]) if data["owner"] else None,
            child_mr_enclaves=[bytes.fromhex(m) for m in data["child_mr_enclaves"]],
            enc_sk=wire.unb64(data["enc_sk"]),
            origin_mode=data["origin_mode"],
        )


@dataclass
class SecretRecord:
    """One stored secret: ciphertext under the KEK plus public metadata."""

    ref_id: str
    project_id: str
    kek_secret: bytes       # AEAD under KEK, AAD = project_id bytes
    name: str
    content_type: str
    mode: str               # "LEGACY" | "RA" | "MA"
    creator: EnclaveIdentity | None
    creator_session_id: str | None
    created_at: float = field(default_factory=time.time)
    passthrough: bool = False  # legacy pass-through build: kek_secret holds raw payload

    def to_json(self) -> str:
        return json.dumps(
            {
                "ref_id": self.ref_id,
                "project_id": self.project_id,
                "kek_secret": wire.b64(self.kek_secret),
                "name": self.name,
                "content_type": self.content_type,
                "mode": self.mode,
                "creator": self.creator.to_dict() if self.creator else None,
                "creator_session_id": self.creator_session_id,
                "created_at": self.created_at,
                "passthrough": self.passthrough,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SecretRecord":
        data = json.loads(text)
        return cls(
            ref_id=data["ref_id"],
            project_id=data["project_id"],
            kek_secret=wire.unb64(data["kek_secret"]),
            name=data["name"],
            content_type=data["content_type"],
            mode=data["mode"],
            creator=EnclaveIdentity.from_dict(data["creator"]) if data["creator"] else None,
            creator_session_id=data.get("creator_session_id"),
            created_at=data.get("created_at", 0.0),
            passthrough=data.get("passthrough", False),
        )


@dataclass
class SessionRow:
    """A persisted established session so any instance can serve its data plane."""

    session_id: str
    project_id: str
    mode: str               # "RA" | "MA" | "ADMIN"
    enc_sk: bytes           # AEAD under KEK, AAD = project_id bytes
    identity: EnclaveIdentity | None
    created_at: float = field(default_factory=time.time)

    def to_json(self) -> str:
        return json.dumps(
            {
                "session_id": self.session_id,
                "project_id": self.project_id,
                "mode": self.mode,
                "enc_sk": wire.b64(self.enc_sk),
                "identity": self.identity.to_dict() if self.identity else None,
                "created_at": self.created_at,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SessionRow":
        data = json.loads(text)
        return cls(
            session_id=data["session_id"],
            project_id=data["project_id"],
            mode=data["mode"],
            enc_sk=wire.unb64(data["enc_sk"]),
            identity=EnclaveIdentity.from_dict(data["identity"]) if data["identity"] else None,
            created_at=data.get("created_at", 0.0),
        )


@dataclass(frozen=True)
class Requester:
    """Who is asking: resolved from a session row by the HTTP layer."""

    session_id: str
    project_id: str
    sk: bytes
    mode: str
    identity: EnclaveIdentity | None = None


# ------------------------------------------------------------- access policy

def check_access(record: ProjectPolicyRecord, requester: EnclaveIdentity) -> str | None:
    """Policy decision: ``None`` to allow, else a deny reason.

    Policy 1 matches the requester measurement against the owner's, policy 2
    the signer, policy 3 membership in the owner's child-measurement list.
    The identity check runs first; an identity that qualifies must then also
    satisfy the version floor (requester ISV_SVN >= owner ISV_SVN).
    """
    if record.policy_no == POLICY_MEASUREMENT:
        if record.owner is None or requester.mr_enclave != record.owner.mr_enclave:
            return DENY_MEASUREMENT
    elif record.policy_no == POLICY_SIGNER:
        if record.owner is None or requester.mr_signer != record.owner.mr_signer:
            return DENY_SIGNER
    elif record.policy_no == POLICY_ACL:
        if requester.mr_enclave not in record.child_mr_enclaves:
            return DENY_ACL
    else:
        raise InvalidArgument(f"unknown policy number {record.policy_no}")
    owner_svn = record.owner.isv_svn if record.owner is not None else 0
    if requester.isv_svn < owner_svn:
        return DENY_SVN
    return None


# ------------------------------------------------------------- trusted core

class TrustedCore:
    """Binds an enclave, its platform, a KEK, and the shared store together."""

    def __init__(
        self,
        enclave: EnclaveHandle,
        store: Store,
        kek_seal_path: str,
        kek_hierarchy: bool = False,
    ):
        self.enclave = enclave
        self.platform = enclave.platform
        self.store = store
        self.kek_seal_path = kek_seal_path
        self.kek_hierarchy = kek_hierarchy
        self.kek_state: KekState | None = None

    # -- KEK lifecycle ------------------------------------------------

    @property
    def kek_present(self) -> bool:
        return self.kek_state is not None

    def _require_kek(self) -> KekState:
        if self.kek_state is None:
            raise KekMissing("no KEK provisioned or recovered")
        return self.kek_state

    def _seal_and_persist_kek(self, kek: bytes, provisioned_by: str) -> KekState:
        blob = seal(self.enclave, kek, SealPolicy.BY_MEASUREMENT)
        with open(self.kek_seal_path, "w", encoding="utf-8") as fh:
            fh.write(blob.to_json())
        state = KekState(
            kek=kek, sealed_form=blob, provisioned_by=provisioned_by, hierarchy=self.kek_hierarchy
        )
        self.kek_state = state
        return state

    def generate_kek_from_seal_key(self) -> KekState:
        """Single-instance mode: the KEK is derived from the seal key, so the
        same enclave on the same platform always recovers the same KEK."""
        kdf = HKDF(algorithm=hashes.SHA256(), length=KEK_LEN, salt=None, info=b"KEK")
        kek = kdf.derive(derive_seal_material(self.enclave))
        return self._seal_and_persist_kek(kek, "SEAL_DERIVED")

    def recover_sealed_kek(self) -> KekState | None:
        """Restart path: unseal the persisted KEK if this enclave/platform owns it."""
        try:
            with open(self.kek_seal_path, "r", encoding="utf-8") as fh:
                blob = SealedBlob.from_json(fh.read())
        except FileNotFoundError:
            return None
        try:
            kek = unseal(self.enclave, blob)
        except UnsealDenied:
            return None
        self.kek_state = KekState(
            kek=kek,
            sealed_form=blob,
            provisioned_by="ADMIN_RA",
            hierarchy=self.kek_hierarchy,
        )
        return self.kek_state

    def provision_kek(self, sk_kek: bytes, session_sk: bytes, overwrite: bool = False) -> KekState:
        """Install an admin-provisioned KEK delivered encrypted under the session key."""
        try:
            kek = decrypt_under_sk(session_sk, sk_kek)
        except BadCiphertext as exc:
            raise ProvisioningFailed("SK_KEK failed to decrypt under the session key") from exc
        if len(kek) != KEK_LEN:
            raise ProvisioningFailed(f"KEK must be {KEK_LEN} bytes")
        if self.kek_state is not None and not overwrite:
            raise KekExists("a KEK is already provisioned; pass overwrite to replace")
        return self._seal_and_persist_kek(kek, "ADMIN_RA")

    # -- project/session key persistence -------------------------------

    def store_session_key(
        self,
        project_id: str,
        sk: bytes,
        policy_no: int,
        owner_identity: EnclaveIdentity | None,
        child_mr_enclaves: list[bytes],
        origin_mode: str,
    ) -> ProjectPolicyRecord:
        """Build the project policy row; the session key is AAD-bound to the project."""
        kek = self._require_kek()
        if origin_mode == "RA" and policy_no != POLICY_ACL:
            raise PolicyNotAllowed("remote attestation supports policy 3 only")
        if policy_no not in (POLICY_MEASUREMENT, POLICY_SIGNER, POLICY_ACL):
            raise InvalidArgument(f"unknown policy number {policy_no}")
        enc_sk = aead_encrypt(kek.project_key(project_id), sk, project_id.encode("utf-8"))
        record = ProjectPolicyRecord(
            project_id=project_id,
            policy_no=policy_no,
            owner=owner_identity,
            child_mr_enclaves=list(child_mr_enclaves),
            enc_sk=enc_sk,
            origin_mode=origin_mode,
        )
        self.store.put("projects", project_id, record.to_json().encode("utf-8"))
        return record

    def load_project_record(self, project_id: str) -> ProjectPolicyRecord:
        return ProjectPolicyRecord.from_json(self.store.get("projects", project_id).decode("utf-8"))

    def load_session_key(self, record: ProjectPolicyRecord) -> bytes:
        """Decrypt the project session key; AAD is the record's own project id,
        so a row copied from another project fails authentication here."""
        kek = self._require_kek()
        try:
            return aead_decrypt(
                kek.project_key(record.project_id),
                record.enc_sk,
                record.project_id.encode("utf-8"),
            )
        except InvalidTag as exc:
            raise IntegrityViolation(
                f"session key for project {record.project_id!r} failed authentication"
            ) from exc

    def persist_session(
        self,
        session_id: str,
        project_id: str,
        sk: bytes,
        mode: str,
        identity: EnclaveIdentity | None,
    ) -> SessionRow:
        kek = self._require_kek()
        row = SessionRow(
            session_id=session_id,
            project_id=project_id,
            mode=mode,
            enc_sk=aead_encrypt(kek.project_key(project_id), sk, project_id.encode("utf-8")),
            identity=identity,
        )
        self.store.put("sessions", session_id, row.to_json().encode("utf-8"))
        return row

    def resolve_session(self, session_id: str) -> Requester:
        """Rehydrate a requester from the shared store (any instance can)."""
        row = SessionRow.from_json(self.store.get("sessions", session_id).decode("utf-8"))
        kek = self._require_kek()
        try:
            sk = aead_decrypt(
                kek.project_key(row.project_id), row.enc_sk, row.project_id.encode("utf-8")
            )
        except InvalidTag as exc:
            raise IntegrityViolation(
                f"session {session_id} key failed authentication"
            ) from exc
        return Requester(
            session_id=session_id,
            project_id=row.project_id,
            sk=sk,
            mode=row.mode,
            identity=row.identity,
        )

    # -- secrets --------------------------------------------------------

    def _fresh_ref_id(self, record_builder) -> str:
        while True:
            ref_id = os.urandom(REF_ID_LEN).hex()
            record = record_builder(ref_id)
            if self.store.put_if_absent("secrets", ref_id, record.to_json().encode("utf-8")):
                return ref_id

    def store_secret(
        self,
        project_id: str,
        sk_secret: bytes,
        sk: bytes,
        name: str,
        content_type: str,
        mode: str,
        creator: EnclaveIdentity | None,
        creator_session_id: str | None,
    ) -> str:
        """Unwrap the wire ciphertext and rewrap for the database (KEK, AAD-bound)."""
        kek = self._require_kek()
        plaintext = decrypt_under_sk(sk, sk_secret)
        kek_secret = aead_encrypt(kek.project_key(project_id), plaintext, project_id.encode("utf-8"))
        return self._fresh_ref_id(
            lambda ref_id: SecretRecord(
                ref_id=ref_id,
                project_id=project_id,
                kek_secret=kek_secret,
                name=name,
                content_type=content_type,
                mode=mode,
                creator=creator,
                creator_session_id=creator_session_id,
            )
        )

    def store_secret_legacy(
        self, project_id: str, plaintext: bytes, name: str, content_type: str
    ) -> str:
        """v1 path: plaintext arrived over the legacy wire; encrypt at rest."""
        kek = self._require_kek()
        kek_secret = aead_encrypt(kek.project_key(project_id), plaintext, project_id.encode("utf-8"))
        return self._fresh_ref_id(
            lambda ref_id: SecretRecord(
                ref_id=ref_id,
                project_id=project_id,
                kek_secret=kek_secret,
                name=name,
                content_type=content_type,
                mode="LEGACY",
                creator=None,
                creator_session_id=None,
            )
        )

    def store_secret_passthrough(
        self, project_id: str, plaintext: bytes, name: str, content_type: str
    ) -> str:
        """Legacy pass-through build: no enclave crypto, payload stored as-is."""
        return self._fresh_ref_id(
            lambda ref_id: SecretRecord(
                ref_id=ref_id,
                project_id=project_id,
                kek_secret=plaintext,
                name=name,
                content_type=content_type,
                mode="LEGACY",
                creator=None,
                creator_session_id=None,
                passthrough=True,
            )
        )

    def load_secret_record(self, ref_id: str) -> SecretRecord:
        return SecretRecord.from_json(self.store.get("secrets", ref_id).decode("utf-8"))

    def _decrypt_record(self, record: SecretRecord) -> bytes:
        if record.passthrough:
            return record.kek_secret
        kek = self._require_kek()
        try:
            return aead_decrypt(
                kek.project_key(record.project_id),
                record.kek_secret,
                record.project_id.encode("utf-8"),
            )
        except InvalidTag as exc:
            raise IntegrityViolation(
                f"secret {record.ref_id} failed authentication"
            ) from exc

    def _is_owner(self, record: SecretRecord, requester: Requester) -> bool:
        if record.creator_session_id is None:
            return False
        if record.creator_session_id == requester.session_id:
            return True
        try:
            creator = self.resolve_session(record.creator_session_id)
        except (NotFound, IntegrityViolation):
            return False
        return creator.sk == requester.sk

    def retrieve_secret(self, ref_id: str, requester: Requester) -> bytes:
        """Release a secret re-encrypted under the requester's session key.

        LEGACY secrets need only project membership (the token was checked at
        the door). RA secrets always open to the holder of the original
        session key; anyone else must present an attested identity that
        passes the project policy. MA secrets release exclusively on a
        policy-passing attested identity.
        """
        record = self.load_secret_record(ref_id)
        if record.project_id != requester.project_id:
            raise AccessDenied(DENY_CROSS_PROJECT, "secret belongs to another project")
        if record.mode == "RA":
            if not self._is_owner(record, requester):
                if requester.identity is None:
                    raise AttestationRequired(
                        "non-owner access to an attested secret requires an attested identity"
                    )
                reason = check_access(self.load_project_record(record.project_id), requester.identity)
                if reason is not None:
                    raise AccessDenied(reason)
        elif record.mode == "MA":
            if requester.identity is None:
                raise AttestationRequired("this secret requires a mutually attested caller")
            reason = check_access(self.load_project_record(record.project_id), requester.identity)
            if reason is not None:
                raise AccessDenied(reason)
        plaintext = self._decrypt_record(record)
        return encrypt_under_sk(requester.sk, plaintext)

    def retrieve_secret_plaintext(self, ref_id: str, project_id: str) -> tuple[SecretRecord, bytes]:
        """v1 path: plaintext release under the legacy trust model only."""
        record = self.load_secret_record(ref_id)
        if record.project_id != project_id:
            raise AccessDenied(DENY_CROSS_PROJECT, "secret belongs to another project")
        if record.mode != "LEGACY":
            raise AccessDenied(
                "attested-secret", "attested secrets are not released over the legacy interface"
            )
        return record, self._decrypt_record(record)
