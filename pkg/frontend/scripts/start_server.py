#!/usr/bin/env python3
"""Start a disposable server instance for the SDK interop tests.

Prints one JSON line with the connection bundle (url, tokens, authority key,
server measurement), then serves until killed. Everything lives in a temp
directory that is removed on exit.
"""

import atexit
import base64
import hashlib
import json
import shutil
import signal
import socket
import sys
import tempfile
import threading
from pathlib import Path

from enclavekms.enclave import PlatformState, load_enclave
from enclavekms.server import InstanceConfig, KmsServer

MANIFEST = b"interop-server-enclave"
SIGNER = b"interop-signer-key"
CLIENT_MANIFEST = b"interop-client-enclave"
CLIENT_SIGNER = b"interop-client-signer"
TOKENS = {"token-a": "proj-a", "token-b": "proj-b"}


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def main() -> int:
    workdir = Path(tempfile.mkdtemp(prefix="sdk-interop-"))
    atexit.register(shutil.rmtree, workdir, ignore_errors=True)

    platform_file = workdir / "platform.json"
    platform = PlatformState.generate()
    platform.save(str(platform_file))
    (workdir / "enclave.manifest").write_bytes(MANIFEST)
    (workdir / "signer.pub").write_bytes(SIGNER)

    # a client-side platform the server trusts, so enclave-running clients
    # of the server package can mutually attest during the interop tests
    client_platform_file = workdir / "client_platform.json"
    client_platform = PlatformState.generate()
    client_platform.save(str(client_platform_file))
    (workdir / "client.manifest").write_bytes(CLIENT_MANIFEST)
    (workdir / "client_signer.pub").write_bytes(CLIENT_SIGNER)

    config = InstanceConfig(
        instance_id="interop0",
        listen_address=f"127.0.0.1:{free_port()}",
        store_root=str(workdir / "store"),
        platform_file=str(platform_file),
        enclave_manifest=str(workdir / "enclave.manifest"),
        signer_key=str(workdir / "signer.pub"),
        kek_mode="SEAL_DERIVED",
        admin_token="admin-token",
        keystone_tokens=TOKENS,
        client_authority_keys=[
            base64.b64encode(client_platform.authority_public_key).decode()
        ],
    )
    server = KmsServer(config)
    enclave = load_enclave(MANIFEST, SIGNER, 1, platform)

    bundle = {
        "url": f"http://{server.address}",
        "tokens": TOKENS,
        "admin_token": "admin-token",
        "authority_public_key": base64.b64encode(platform.authority_public_key).decode(),
        "platform_file": str(platform_file),
        "store_root": str(workdir / "store"),
        "server_mr_enclave": enclave.identity.mr_enclave.hex(),
        "client_platform_file": str(client_platform_file),
        "client_manifest": str(workdir / "client.manifest"),
        "client_signer": str(workdir / "client_signer.pub"),
        "client_mr_enclave": hashlib.sha256(CLIENT_MANIFEST).hexdigest(),
    }
    print(json.dumps(bundle), flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    thread = threading.Thread(target=server.httpd.serve_forever, daemon=True)
    thread.start()
    stop.wait()
    server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
