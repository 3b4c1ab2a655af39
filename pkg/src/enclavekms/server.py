"""HTTP surface of one KMS instance.

Endpoints (all bodies JSON, binary fields base64, session/ref ids hex):

  GET  /health                       -> {instance_id, kek_present}
  POST /v1/secrets                   legacy store:    {payload, name, content_type} + X-Auth-Token
  GET  /v1/secrets/<ref>             legacy retrieve  (plaintext on the wire, legacy trust model)
  POST /v2/attest/start              -> {session_id, msg1}; sets the barbie_node sticky cookie
  POST /v2/attest/msg2               {msg2}  -> {msg3}
  POST /v2/attest/msg4               {msg4}  -> {status}            (RA close)
                                     {s_msg4} -> {status, msg2}     (opens reverse attestation)
  POST /v2/attest/ma_msg3            {session_id, msg3} -> {c_msg4}
  POST /v2/kek                       {session_id, sk_kek, overwrite?} -> {status}
  POST /v2/policy                    {session_id, policy, child_mrenclaves[]} -> {status}
  POST /v2/secrets                   {session_id, sk_secret, name, content_type} -> {secret_ref}
  GET  /v2/secrets/<ref>?session_id= -> {sk_secret}

Mid-handshake attestation state is deliberately instance-local memory: a
handshake message landing on a different instance answers 404
unknown-session, which is the failure sticky routing exists to prevent.
Established sessions are persisted KEK-encrypted in the shared store, so any
instance serves the data plane. Admin sessions are the exception: they stay
in memory (KEK provisioning must work before a KEK exists) and the admin
attests each instance directly.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from . import attestation as att
from . import wire
from .core import POLICY_ACL, Requester, TrustedCore, check_access
from .enclave import PlatformState, load_enclave, verify_quote
from .errors import (
    AccessDenied,
    AttestationFailed,
    AttestationRequired,
    BadCiphertext,
    BindingFailed,
    HandshakeFailed,
    IdentityRejected,
    IntegrityViolation,
    InvalidArgument,
    KekExists,
    KekMissing,
    KmsError,
    MutualAttestationFailed,
    NotFound,
    PolicyNotAllowed,
    ProtocolError,
    ProvisioningFailed,
    SessionBusy,
    StoreError,
    UnknownSession,
)
from .store import Store

STICKY_COOKIE = "barbie_node"

ENV_LISTEN = "ENCLAVEKMS_LISTEN"
ENV_STORE_ROOT = "ENCLAVEKMS_STORE_ROOT"

_HEX_ID = re.compile(r"[0-9a-f]{32}")


def _checked_ref(ref_id: str) -> str:
    if not _HEX_ID.fullmatch(ref_id or ""):
        raise NotFound(f"no secret {ref_id!r}")
    return ref_id

_STATUS_BY_ERROR = {
    InvalidArgument: 400,
    ProtocolError: 400,
    BadCiphertext: 400,
    HandshakeFailed: 400,
    BindingFailed: 400,
    ProvisioningFailed: 400,
    IdentityRejected: 403,
    AttestationFailed: 403,
    MutualAttestationFailed: 403,
    AccessDenied: 403,
    PolicyNotAllowed: 403,
    NotFound: 404,
    UnknownSession: 404,
    KekExists: 409,
    SessionBusy: 409,
    IntegrityViolation: 409,
    AttestationRequired: 428,
    KekMissing: 503,
    StoreError: 500,
}


def status_for(exc: KmsError) -> int:
    for klass, status in _STATUS_BY_ERROR.items():
        if isinstance(exc, klass):
            return status
    return 500


@dataclass
class InstanceConfig:
    """Everything one instance needs; serializable as a JSON config file."""

    instance_id: str
    listen_address: str            # "host:port"
    store_root: str
    platform_file: str
    enclave_manifest: str          # path to the manifest bytes to measure
    signer_key: str                # path to the signer public key encoding
    kek_mode: str = "SEAL_DERIVED"  # or "ADMIN_PROVISIONED"
    admin_token: str = "admin-token"
    keystone_tokens: dict = field(default_factory=dict)  # token -> project_id
    isv_svn: int = 1
    client_authority_keys: list = field(default_factory=list)  # b64 Ed25519 keys
    kek_seal_path: str = ""
    kek_hierarchy: bool = False
    v1_passthrough: bool = False
    request_log: str = ""

    def __post_init__(self):
        if not self.kek_seal_path:
            self.kek_seal_path = str(Path(self.store_root) / "_kek" / f"{self.instance_id}.json")
        if not self.request_log:
            self.request_log = str(Path(self.store_root) / "_logs" / f"{self.instance_id}.jsonl")

    @classmethod
    def from_file(cls, path: str) -> "InstanceConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        cfg = cls(**data)
        if os.environ.get(ENV_LISTEN):
            cfg.listen_address = os.environ[ENV_LISTEN]
        if os.environ.get(ENV_STORE_ROOT):
            cfg.store_root = os.environ[ENV_STORE_ROOT]
        return cfg

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2)


class _ServerSession:
    """Instance-local handshake state plus caller authorization context."""

    def __init__(self, session: att.AttestationSession, project_id: str, is_admin: bool):
        self.session = session
        self.project_id = project_id
        self.is_admin = is_admin
        self.reverse: att.AttestationSession | None = None
        self.lock = threading.Lock()

    @property
    def idle_for(self) -> float:
        return time.time() - self.session.last_used


class KmsApp:
    """Request-handling logic, independent of the HTTP plumbing."""

    def __init__(self, config: InstanceConfig):
        self.config = config
        self.platform = PlatformState.load(config.platform_file)
        manifest = Path(config.enclave_manifest).read_bytes()
        signer = Path(config.signer_key).read_bytes()
        self.enclave = load_enclave(manifest, signer, config.isv_svn, self.platform)
        self.store = Store(config.store_root)
        Path(config.kek_seal_path).parent.mkdir(parents=True, exist_ok=True)
        Path(config.request_log).parent.mkdir(parents=True, exist_ok=True)
        self.core = TrustedCore(
            self.enclave, self.store, config.kek_seal_path, kek_hierarchy=config.kek_hierarchy
        )
        if config.kek_mode == "SEAL_DERIVED":
            self.core.generate_kek_from_seal_key()
        else:
            self.core.recover_sealed_kek()
        self._sessions: dict[str, _ServerSession] = {}
        self._sessions_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._trusted_client_keys = [wire.unb64(k) for k in config.client_authority_keys]
        if self.platform.authority_public_key not in self._trusted_client_keys:
            self._trusted_client_keys.append(self.platform.authority_public_key)

    # -- session bookkeeping -------------------------------------------

    def _purge_idle(self) -> None:
        cutoff = att.SESSION_IDLE_TIMEOUT
        stale = [sid for sid, s in self._sessions.items() if s.idle_for > cutoff]
        for sid in stale:
            self._sessions.pop(sid, None)

    def _register(self, server_session: _ServerSession) -> None:
        with self._sessions_lock:
            self._purge_idle()
            self._sessions[server_session.session.session_id.hex()] = server_session

    def _lookup(self, session_id_hex: str) -> _ServerSession:
        with self._sessions_lock:
            found = self._sessions.get(session_id_hex)
        if found is None:
            raise UnknownSession(f"no handshake session {session_id_hex} on this instance")
        return found

    def _authenticate(self, token: str | None) -> tuple[str, bool]:
        if token and token == self.config.admin_token:
            return "admin", True
        if token and token in self.config.keystone_tokens:
            return self.config.keystone_tokens[token], False
        raise _Unauthorized()

    def _resolve_requester(self, session_id_hex: str) -> Requester:
        if not _HEX_ID.fullmatch(session_id_hex or ""):
            raise AttestationRequired("no established session; attest first")
        try:
            return self.core.resolve_session(session_id_hex)
        except NotFound:
            raise AttestationRequired("no established session; attest first") from None

    # -- endpoint implementations ---------------------------------------

    def health(self) -> dict:
        return {"instance_id": self.config.instance_id, "kek_present": self.core.kek_present}

    def v1_store(self, project_id: str, body: dict) -> dict:
        payload = wire.unb64(body.get("payload", ""))
        name = str(body.get("name", ""))
        content_type = str(body.get("content_type", "application/octet-stream"))
        if self.config.v1_passthrough:
            ref = self.core.store_secret_passthrough(project_id, payload, name, content_type)
        else:
            ref = self.core.store_secret_legacy(project_id, payload, name, content_type)
        return {"secret_ref": ref}

    def v1_get(self, project_id: str, ref_id: str) -> dict:
        record, plaintext = self.core.retrieve_secret_plaintext(_checked_ref(ref_id), project_id)
        return {
            "payload": wire.b64(plaintext),
            "name": record.name,
            "content_type": record.content_type,
        }

    def attest_start(self, token: str | None) -> tuple[dict, str]:
        project_id, is_admin = self._authenticate(token)
        session, msg1 = att.responder_start(self.enclave)
        self._register(_ServerSession(session, project_id, is_admin))
        body = {"session_id": session.session_id.hex(), "msg1": att.message_to_dict(msg1)}
        return body, self.config.instance_id

    def attest_msg2(self, body: dict) -> dict:
        msg2 = att.message_from_dict(body.get("msg2", body))
        if not isinstance(msg2, att.Msg2):
            raise ProtocolError("expected a msg2")
        server_session = self._lookup(msg2.session_id.hex())
        if not server_session.lock.acquire(blocking=False):
            raise SessionBusy("another message is in flight for this session")
        try:
            server_session.session.touch()
            msg3 = att.responder_process_msg2(
                server_session.session, msg2, self.enclave, self.platform
            )
            return {"msg3": att.message_to_dict(msg3)}
        finally:
            server_session.lock.release()

    def attest_msg4(self, body: dict) -> dict:
        msg = att.message_from_dict(body.get("msg4", body.get("s_msg4", body)))
        server_session = self._lookup(msg.session_id.hex())
        if not server_session.lock.acquire(blocking=False):
            raise SessionBusy("another message is in flight for this session")
        try:
            server_session.session.touch()
            if isinstance(msg, att.Msg4):
                return self._close_ra(server_session, msg)
            if isinstance(msg, att.SMsg4):
                return self._open_reverse(server_session, msg)
            raise ProtocolError("expected a msg4 or s_msg4")
        finally:
            server_session.lock.release()

    def _close_ra(self, server_session: _ServerSession, msg4: att.Msg4) -> dict:
        session = server_session.session
        att.responder_process_msg4(session, msg4)
        if msg4.status != "OK":
            return {"status": "REJECTED"}
        if server_session.is_admin:
            # admin sessions are never persisted; they must outlive a missing KEK
            return {"status": "OK"}
        project_id = server_session.project_id
        if not self.store.exists("projects", project_id):
            self.core.store_session_key(
                project_id, session.keys.sk, POLICY_ACL, None, [], origin_mode="RA"
            )
        self.core.persist_session(
            session.session_id.hex(), project_id, session.keys.sk, "RA", None
        )
        return {"status": "OK"}

    def _open_reverse(self, server_session: _ServerSession, s_msg4: att.SMsg4) -> dict:
        session = server_session.session
        client_msg1 = att.server_accept_s_msg4(session, s_msg4)
        if session.project_id != server_session.project_id:
            raise AccessDenied(
                "project-mismatch",
                "s_msg4 project id does not match the authenticated project",
            )
        reverse, msg2 = att.challenger_process_msg1(client_msg1)
        server_session.reverse = reverse
        return {"status": "REVERSE_RA", "msg2": att.message_to_dict(msg2)}

    def attest_ma_msg3(self, body: dict) -> dict:
        session_id = str(body.get("session_id", ""))
        server_session = self._lookup(session_id)
        if not server_session.lock.acquire(blocking=False):
            raise SessionBusy("another message is in flight for this session")
        try:
            server_session.session.touch()
            msg3 = att.message_from_dict(body.get("msg3", {}))
            if not isinstance(msg3, att.Msg3):
                raise ProtocolError("expected a msg3")
            if server_session.reverse is None:
                raise ProtocolError("no reverse attestation in progress")
            authority_key = self._pick_client_authority(msg3)
            att.challenger_process_msg3(server_session.reverse, msg3, authority_key)
            c_msg4 = self._finish_ma(server_session)
            return {"c_msg4": att.message_to_dict(c_msg4)}
        finally:
            server_session.lock.release()

    def _pick_client_authority(self, msg3: att.Msg3) -> bytes:
        for key in self._trusted_client_keys:
            try:
                verify_quote(msg3.quote, key)
                return key
            except AttestationFailed:
                continue
        raise AttestationFailed("client quote not signed by any trusted authority")

    def _finish_ma(self, server_session: _ServerSession) -> att.CMsg4:
        """Close mutual attestation: verify the report hash, then either hand
        the project's shared key to a policy-approved enclave or mint a fresh
        session key. The project row is loaded here, which is what detects a
        copied AAD-bound key row."""
        session = server_session.session
        project_id = session.project_id
        sk_final = None
        if self.store.exists("projects", project_id):
            record = self.core.load_project_record(project_id)
            project_sk = self.core.load_session_key(record)  # integrity-violation on tamper
            client_identity = server_session.reverse.peer_report.identity
            if check_access(record, client_identity) is None:
                sk_final = project_sk
        c_msg4 = att.server_process_s_msg4(session, server_session.reverse, sk_new=sk_final)
        if not self.store.exists("projects", project_id):
            self.core.store_session_key(
                project_id,
                session.sk_override,
                1,
                session.peer_identity,
                [],
                origin_mode="MA",
            )
        self.core.persist_session(
            session.session_id.hex(),
            project_id,
            session.sk_override,
            "MA",
            session.peer_identity,
        )
        return c_msg4

    def provision_kek(self, body: dict) -> dict:
        session_id = str(body.get("session_id", ""))
        try:
            server_session = self._lookup(session_id)
        except UnknownSession:
            raise UnknownSession(f"no admin session {session_id} on this instance") from None
        if not server_session.is_admin:
            raise AccessDenied("non-admin", "KEK provisioning requires the admin token")
        if server_session.session.state is not att.State.ESTABLISHED:
            raise ProtocolError("admin session not established")
        server_session.session.touch()
        sk_kek = wire.unb64(body.get("sk_kek", ""))
        overwrite = bool(body.get("overwrite", False))
        self.core.provision_kek(sk_kek, server_session.session.negotiated_sk, overwrite=overwrite)
        return {"status": "OK", "kek_present": True}

    def set_policy(self, body: dict) -> dict:
        requester = self._resolve_requester(str(body.get("session_id", "")))
        try:
            policy_no = int(body.get("policy"))
        except (TypeError, ValueError):
            raise InvalidArgument("policy must be 1, 2, or 3") from None
        children = [bytes.fromhex(h) for h in body.get("child_mrenclaves", [])]
        if requester.mode == "RA" and policy_no != POLICY_ACL:
            raise PolicyNotAllowed("remote attestation supports policy 3 only")
        try:
            record = self.core.load_project_record(requester.project_id)
        except NotFound:
            record = None
        owner = requester.identity
        origin = requester.mode
        if record is not None:
            sk = self.core.load_session_key(record)
            if record.owner is not None:
                if requester.identity is None or (
                    requester.identity.mr_enclave != record.owner.mr_enclave
                    or requester.identity.mr_signer != record.owner.mr_signer
                ):
                    raise AccessDenied("not-owner", "only the project owner may change policy")
            owner = record.owner or requester.identity
            origin = record.origin_mode
        else:
            sk = requester.sk
        self.core.store_session_key(
            requester.project_id, sk, policy_no, owner, children, origin_mode=origin
        )
        return {"status": "OK"}

    def v2_store(self, body: dict) -> dict:
        requester = self._resolve_requester(str(body.get("session_id", "")))
        sk_secret = wire.unb64(body.get("sk_secret", ""))
        ref = self.core.store_secret(
            project_id=requester.project_id,
            sk_secret=sk_secret,
            sk=requester.sk,
            name=str(body.get("name", "")),
            content_type=str(body.get("content_type", "application/octet-stream")),
            mode=requester.mode,
            creator=requester.identity,
            creator_session_id=requester.session_id,
        )
        return {"secret_ref": ref}

    def v2_get(self, ref_id: str, session_id: str) -> dict:
        requester = self._resolve_requester(session_id)
        sk_secret = self.core.retrieve_secret(_checked_ref(ref_id), requester)
        return {"sk_secret": wire.b64(sk_secret)}

    # -- request log ------------------------------------------------------

    def log_request(self, method: str, path: str, status: int, duration_ms: float) -> None:
        line = json.dumps(
            {
                "ts": time.time(),
                "instance_id": self.config.instance_id,
                "method": method,
                "path": path,
                "status": status,
                "duration_ms": round(duration_ms, 3),
            }
        )
        with self._log_lock:
            with open(self.config.request_log, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class _Unauthorized(Exception):
    pass


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def app(self) -> KmsApp:
        return self.server.app  # type: ignore[attr-defined]

    def log_message(self, format, *args):  # stdlib stderr chatter -> JSON log instead
        pass

    def _read_body(self) -> dict:
        if not self._raw_body:
            return {}
        try:
            data = json.loads(self._raw_body)
        except ValueError as exc:
            raise ProtocolError(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ProtocolError("request body must be a JSON object")
        return data

    def _send(self, status: int, body: dict, set_cookie: str | None = None) -> None:
        payload = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        if set_cookie is not None:
            self.send_header("Set-Cookie", f"{STICKY_COOKIE}={set_cookie}; Path=/")
        self.end_headers()
        self.wfile.write(payload)
        self._log(status)

    def _log(self, status: int) -> None:
        duration_ms = (time.time() - self._started) * 1000.0
        try:
            self.app.log_request(self.command, self.path, status, duration_ms)
        except OSError:
            pass

    def _dispatch(self) -> None:
        self._started = time.time()
        # always drain the body so keep-alive framing stays intact
        length = int(self.headers.get("Content-Length", 0))
        self._raw_body = self.rfile.read(length) if length else b""
        try:
            self._route()
        except _Unauthorized:
            self._send(401, {"error": "unauthorized", "detail": "unknown token"})
        except KmsError as exc:
            body = {"error": exc.code, "detail": str(exc)}
            if isinstance(exc, AccessDenied):
                body["reason"] = exc.reason
            self._send(status_for(exc), body)
        except Exception as exc:  # noqa: BLE001 - last-resort boundary
            self._send(500, {"error": "internal", "detail": str(exc)})

    def _route(self) -> None:
        parsed = urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        method = self.command

        if method == "GET" and parts == ["health"]:
            self._send(200, self.app.health())
            return

        if parts and parts[0] == "v1":
            token = self.headers.get("X-Auth-Token")
            project_id, is_admin = self.app._authenticate(token)
            if is_admin:
                raise _Unauthorized()
            if method == "POST" and parts == ["v1", "secrets"]:
                self._send(201, self.app.v1_store(project_id, self._read_body()))
                return
            if method == "GET" and len(parts) == 3 and parts[1] == "secrets":
                self._send(200, self.app.v1_get(project_id, parts[2]))
                return

        if parts and parts[0] == "v2":
            if method == "POST" and parts == ["v2", "attest", "start"]:
                body, instance_id = self.app.attest_start(self.headers.get("X-Auth-Token"))
                self._send(200, body, set_cookie=instance_id)
                return
            if method == "POST" and parts == ["v2", "attest", "msg2"]:
                self._send(200, self.app.attest_msg2(self._read_body()))
                return
            if method == "POST" and parts == ["v2", "attest", "msg4"]:
                self._send(200, self.app.attest_msg4(self._read_body()))
                return
            if method == "POST" and parts == ["v2", "attest", "ma_msg3"]:
                self._send(200, self.app.attest_ma_msg3(self._read_body()))
                return
            if method == "POST" and parts == ["v2", "kek"]:
                self._send(200, self.app.provision_kek(self._read_body()))
                return
            if method == "POST" and parts == ["v2", "policy"]:
                self._send(200, self.app.set_policy(self._read_body()))
                return
            if method == "POST" and parts == ["v2", "secrets"]:
                self._send(201, self.app.v2_store(self._read_body()))
                return
            if method == "GET" and len(parts) == 3 and parts[1] == "secrets":
                query = parse_qs(parsed.query)
                session_id = (query.get("session_id") or [""])[0]
                self._send(200, self.app.v2_get(parts[2], session_id))
                return

        self._send(404, {"error": "not-found", "detail": f"no route for {method} {parsed.path}"})

    def do_GET(self) -> None:
        self._dispatch()

    def do_POST(self) -> None:
        self._dispatch()


class KmsServer:
    """A running instance: HTTP server plus its app state."""

    def __init__(self, config: InstanceConfig):
        host, port = config.listen_address.rsplit(":", 1)
        self.app = KmsApp(config)
        self.httpd = ThreadingHTTPServer((host, int(port)), _Handler)
        self.httpd.app = self.app  # type: ignore[attr-defined]
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> "KmsServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(config: InstanceConfig) -> KmsServer:
    """Construct and start an instance in a background thread."""
    return KmsServer(config).start_background()
