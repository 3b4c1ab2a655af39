"""Command-line interface.

Exit codes: 0 success, 2 protocol/attestation failure, 3 access denied,
4 transport error. All command output is JSON on stdout for scripting.
"""

from __future__ import annotations

import argparse
import base64
import json
import signal
import sys
import threading
from pathlib import Path

from . import cluster as cluster_mod
from . import reporting, wire
from .client import ClientProfile, ClientSession, KmsClient
from .enclave import PlatformState, load_enclave
from .errors import (
    AccessDenied,
    AttestationRequired,
    KmsError,
    TransportError,
)
from .server import InstanceConfig, KmsServer


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _read_key_material(value: str) -> bytes:
    """Accept a raw-key file, a platform JSON file, or inline base64/hex."""
    path = Path(value)
    if path.exists():
        text = path.read_text().strip()
        try:
            data = json.loads(text)
            if isinstance(data, dict) and "authority_public_key" in data:
                return wire.unb64(data["authority_public_key"])
        except ValueError:
            pass
        value = text
    try:
        return bytes.fromhex(value)
    except ValueError:
        return base64.b64decode(value)


def _load_local_enclave(args) -> "object":
    platform = PlatformState.load(args.client_platform)
    manifest = Path(args.manifest).read_bytes()
    signer = Path(args.signer).read_bytes()
    return load_enclave(manifest, signer, args.isv_svn, platform)


def _profile(args, mode: str) -> ClientProfile:
    return ClientProfile(
        mode=mode,
        server_url=args.server,
        token=args.token,
        project_id=args.project,
        authority_key=_read_key_material(args.authority_key) if args.authority_key else None,
        expected_mr_enclave=bytes.fromhex(args.expect_mrenclave) if args.expect_mrenclave else None,
        expected_mr_signer=bytes.fromhex(args.expect_mrsigner) if args.expect_mrsigner else None,
        local_enclave=_load_local_enclave(args) if mode == "ENABLED" else None,
    )


def cmd_platform_init(args) -> int:
    platform = PlatformState.generate()
    platform.save(args.out)
    _emit({"platform_file": args.out, "authority_public_key": wire.b64(platform.authority_public_key)})
    return 0


def cmd_serve(args) -> int:
    config = InstanceConfig.from_file(args.config)
    server = KmsServer(config)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    thread = threading.Thread(target=server.httpd.serve_forever, daemon=True)
    thread.start()
    _emit({"instance_id": config.instance_id, "listening": server.address})
    sys.stdout.flush()
    stop.wait()
    server.shutdown()
    return 0


def cmd_attest(args) -> int:
    mode = args.mode.upper()
    client = KmsClient(_profile(args, mode))
    session = client.attest()
    if args.session_out:
        Path(args.session_out).write_text(session.to_json())
    _emit(
        {
            "session_id": session.session_id,
            "mode": session.mode,
            "server_mr_enclave": session.server_identity.mr_enclave.hex()
            if session.server_identity
            else None,
            "session_file": args.session_out or None,
        }
    )
    return 0


def cmd_provision_kek(args) -> int:
    try:
        kek = bytes.fromhex(args.kek_hex)
    except ValueError:
        _emit({"error": "invalid-argument", "detail": "kek must be hex"})
        return 2
    if len(kek) != 32:
        _emit({"error": "invalid-argument", "detail": "kek must be 64 hex chars (32 bytes)"})
        return 2
    client = KmsClient(_profile(args, "ADMIN"))
    session = client.attest()
    client.provision_kek(session, kek, overwrite=args.overwrite)
    _emit({"status": "OK", "server": args.server})
    return 0


def _load_session(args) -> ClientSession:
    return ClientSession.from_json(Path(args.session).read_text())


def cmd_set_policy(args) -> int:
    client = KmsClient(_profile(args, args.mode.upper()))
    session = _load_session(args)
    children = [bytes.fromhex(child) for child in args.child]
    client.set_policy(session, args.policy, children)
    _emit({"status": "OK", "policy": args.policy, "children": args.child})
    return 0


def cmd_store(args) -> int:
    if args.payload is not None:
        plaintext = args.payload.encode("utf-8")
    else:
        plaintext = Path(args.payload_file).read_bytes()
    mode = args.mode.upper()
    client = KmsClient(_profile(args, mode))
    if mode == "LEGACY":
        ref = client.legacy_store(args.name, plaintext, args.content_type)
    else:
        session = _load_session(args)
        acl = None
        if args.policy is not None:
            acl = {"policy": args.policy, "child_mrenclaves": [bytes.fromhex(c) for c in args.child]}
        ref = client.store_secret(session, args.name, plaintext, acl=acl, content_type=args.content_type)
    _emit({"secret_ref": ref})
    return 0


def cmd_get(args) -> int:
    mode = args.mode.upper()
    client = KmsClient(_profile(args, mode))
    if mode == "LEGACY":
        plaintext = client.legacy_get(args.ref)
    else:
        plaintext = client.get_secret(_load_session(args), args.ref)
    _emit({"payload": wire.b64(plaintext)})
    return 0


def cmd_bench(args) -> int:
    report, rows = cluster_mod.bench(
        args.url,
        users=args.users,
        concurrency=args.concurrency,
        requests_per_user=args.requests,
        workload=args.workload.replace("-", "_").upper(),
        token=args.token,
        project_id=args.project,
        authority_key=_read_key_material(args.authority_key),
        client_platform_file=args.client_platform,
    )
    artifacts = reporting.write_report(report, rows, args.out)
    _emit({"report": report.to_dict(), "artifacts": {k: str(v) for k, v in artifacts.items()}})
    return 0


def cmd_cluster_up(args) -> int:
    handle = cluster_mod.launch_cluster(
        n=args.n,
        workdir=args.store,
        kek_mode=args.kek_mode.upper(),
        kek=bytes.fromhex(args.kek_hex) if args.kek_hex else None,
        routing=args.routing.upper().replace("-", "_"),
        honor_sticky=not args.no_sticky,
        v1_passthrough=args.v1_passthrough,
    )
    manifest = handle.write_manifest_file()
    _emit({"cluster_file": str(manifest), **handle.describe()})
    sys.stdout.flush()
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    handle.shutdown()
    return 0


def cmd_cluster_bench(args) -> int:
    info = json.loads(Path(args.cluster).read_text())
    token = args.token or next(iter(info["tokens"]))
    project = info["tokens"].get(token, args.project)
    report, rows = cluster_mod.bench(
        args.url or info["lb_url"],
        users=args.users,
        concurrency=args.concurrency,
        requests_per_user=args.requests,
        workload=args.workload.replace("-", "_").upper(),
        token=token,
        project_id=project,
        authority_key=wire.unb64(info["authority_key"]),
        client_platform_file=info.get("client_platform_file"),
    )
    artifacts = reporting.write_report(report, rows, args.out)
    server_side = cluster_mod.read_request_logs(info["store_root"])
    _emit(
        {
            "report": report.to_dict(),
            "server_log_summary": server_side,
            "artifacts": {k: str(v) for k, v in artifacts.items()},
        }
    )
    return 0


def _add_client_flags(parser: argparse.ArgumentParser, default_mode: str = "aware") -> None:
    parser.add_argument("--mode", default=default_mode, choices=["legacy", "aware", "enabled", "admin"])
    parser.add_argument("--server", required=True, help="server or load-balancer URL")
    parser.add_argument("--project", default="", help="tenant/project id")
    parser.add_argument("--token", default="", help="authentication token")
    parser.add_argument("--authority-key", default="", help="quoting authority public key (file, hex, or base64)")
    parser.add_argument("--expect-mrenclave", default="", help="pin the server enclave measurement (hex)")
    parser.add_argument("--expect-mrsigner", default="", help="pin the server enclave signer (hex)")
    parser.add_argument("--manifest", default="", help="local enclave manifest file (enabled mode)")
    parser.add_argument("--signer", default="", help="local enclave signer key file (enabled mode)")
    parser.add_argument("--client-platform", default="", help="local platform state file (enabled mode)")
    parser.add_argument("--isv-svn", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enclavekms", description="attested key-management service")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("platform", help="platform-state utilities")
    psub = p.add_subparsers(dest="platform_command", required=True)
    pinit = psub.add_parser("init", help="generate a platform state file")
    pinit.add_argument("--out", required=True)
    pinit.set_defaults(func=cmd_platform_init)

    p = sub.add_parser("serve", help="run one server instance")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("attest", help="negotiate a session")
    _add_client_flags(p)
    p.add_argument("--session-out", default="", help="write the established session to this file")
    p.set_defaults(func=cmd_attest)

    p = sub.add_parser("provision-kek", help="admin: install the master key")
    _add_client_flags(p, default_mode="admin")
    p.add_argument("--kek-hex", required=True, help="64 hex chars")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_provision_kek)

    p = sub.add_parser("set-policy", help="set the project access policy")
    _add_client_flags(p)
    p.add_argument("--session", required=True, help="session file from attest")
    p.add_argument("--policy", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--child", action="append", default=[], help="child measurement (hex); repeatable")
    p.set_defaults(func=cmd_set_policy)

    p = sub.add_parser("store", help="store a secret")
    _add_client_flags(p)
    p.add_argument("--session", default="", help="session file from attest (non-legacy)")
    p.add_argument("--name", required=True)
    p.add_argument("--payload", default=None, help="inline payload string")
    p.add_argument("--payload-file", default=None, help="read payload bytes from file")
    p.add_argument("--content-type", default="application/octet-stream")
    p.add_argument("--policy", type=int, default=None, choices=[1, 2, 3])
    p.add_argument("--child", action="append", default=[], help="child measurement (hex); repeatable")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("get", help="retrieve a secret")
    _add_client_flags(p)
    p.add_argument("--session", default="", help="session file from attest (non-legacy)")
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_get)

    p = sub.add_parser("bench", help="benchmark a server or load balancer")
    p.add_argument("--url", required=True)
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--concurrency", type=int, default=2)
    p.add_argument("--requests", type=int, default=100)
    p.add_argument("--workload", default="v2-ra-store", choices=["v1-store", "v2-ra-store", "v2-ma-roundtrip"])
    p.add_argument("--out", default="report.json")
    p.add_argument("--token", required=True)
    p.add_argument("--project", required=True)
    p.add_argument("--authority-key", required=True)
    p.add_argument("--client-platform", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cluster", help="cluster operations")
    csub = p.add_subparsers(dest="cluster_command", required=True)

    cup = csub.add_parser("up", help="launch n instances behind a load balancer")
    cup.add_argument("--n", type=int, required=True)
    cup.add_argument("--store", required=True, help="cluster working directory (shared store inside)")
    cup.add_argument("--kek-mode", default="seal_derived", choices=["seal_derived", "admin_provisioned"])
    cup.add_argument("--kek-hex", default="", help="KEK for admin_provisioned mode")
    cup.add_argument("--routing", default="round-robin", choices=["round-robin", "random", "least-outstanding"])
    cup.add_argument("--no-sticky", action="store_true")
    cup.add_argument("--v1-passthrough", action="store_true")
    cup.set_defaults(func=cmd_cluster_up)

    cbench = csub.add_parser("bench", help="benchmark a running cluster")
    cbench.add_argument("--cluster", required=True, help="cluster.json from `cluster up`")
    cbench.add_argument("--url", default="", help="override target URL (default: the LB)")
    cbench.add_argument("--users", type=int, default=5)
    cbench.add_argument("--concurrency", type=int, default=2)
    cbench.add_argument("--requests", type=int, default=100)
    cbench.add_argument("--workload", default="v2-ra-store", choices=["v1-store", "v2-ra-store", "v2-ma-roundtrip"])
    cbench.add_argument("--out", default="report.json")
    cbench.add_argument("--token", default="")
    cbench.add_argument("--project", default="")
    cbench.set_defaults(func=cmd_cluster_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AccessDenied, AttestationRequired) as exc:
        _emit({"error": exc.code, "reason": getattr(exc, "reason", None), "detail": str(exc)})
        return 3
    except TransportError as exc:
        _emit({"error": exc.code, "detail": str(exc)})
        return 4
    except KmsError as exc:
        _emit({"error": exc.code, "detail": str(exc)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
