"""Cluster harness: N server instances over one shared store behind a
simulated HTTP load balancer, plus the benchmark driver.

Instances run as separate OS processes (``python -m enclavekms.cli serve``)
sharing a store directory; the load balancer is a threaded reverse proxy with
ROUND_ROBIN / RANDOM / LEAST_OUTSTANDING routing and optional sticky-cookie
affinity on ``barbie_node``. Every proxied response carries an ``X-Backend``
header naming the instance that served it.

The benchmark driver runs each user stream in its own OS process (client-side
crypto would otherwise serialize on one interpreter lock) with ``concurrency``
threads per stream. Timing follows the classic HTTP benchmark tool's
semantics: connect time is the TCP connect of the per-request connection,
processing time is everything after it on that connection, and the
across-connections mean divides the per-request mean by the concurrency
level. Per-request latencies are dumped as CSV next to the JSON report and
rendered to figures.
"""

from __future__ import annotations

import http.client
import json
import multiprocessing
import os
import random
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import attestation as att
from . import wire
from .core import encrypt_under_sk, decrypt_under_sk
from .enclave import PlatformState, load_enclave
from .errors import KmsError, TransportError
from .server import STICKY_COOKIE

ROUTING_POLICIES = ("ROUND_ROBIN", "RANDOM", "LEAST_OUTSTANDING")
WORKLOADS = ("V1_STORE", "V2_RA_STORE", "V2_MA_ROUNDTRIP")

_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailers",
    "transfer-encoding",
    "upgrade",
}


# --------------------------------------------------------------- balancer

@dataclass
class Backend:
    instance_id: str
    address: str  # host:port
    healthy: bool = True
    outstanding: int = 0


@dataclass
class LbConfig:
    backends: list  # list[Backend]
    routing: str = "ROUND_ROBIN"
    sticky_cookie_name: str = STICKY_COOKIE
    honor_sticky: bool = True

    def __post_init__(self):
        if self.routing not in ROUTING_POLICIES:
            raise ValueError(f"unknown routing policy {self.routing!r}")


class LoadBalancer:
    """Reverse proxy with pluggable routing and cookie stickiness."""

    def __init__(self, config: LbConfig, listen: str = "127.0.0.1:0"):
        self.config = config
        self._rr_counter = 0
        self._lock = threading.Lock()
        self._rng = random.Random()
        host, port = listen.rsplit(":", 1)
        self.httpd = ThreadingHTTPServer((host, int(port)), _LbHandler)
        self.httpd.lb = self  # type: ignore[attr-defined]
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None
        self._health_thread: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def route(self, sticky_value: str | None = None) -> Backend:
        """Pick a backend: sticky override first, then the routing policy."""
        with self._lock:
            healthy = [b for b in self.config.backends if b.healthy]
            if not healthy:
                raise TransportError("no healthy backend")
            if self.config.honor_sticky and sticky_value:
                for backend in healthy:
                    if backend.instance_id == sticky_value:
                        return backend
            if self.config.routing == "ROUND_ROBIN":
                backend = healthy[self._rr_counter % len(healthy)]
                self._rr_counter += 1
                return backend
            if self.config.routing == "RANDOM":
                return self._rng.choice(healthy)
            # LEAST_OUTSTANDING: fewest in-flight, ties by list order
            return min(healthy, key=lambda b: b.outstanding)

    def _check_health_once(self) -> None:
        for backend in self.config.backends:
            host, port = backend.address.rsplit(":", 1)
            try:
                conn = http.client.HTTPConnection(host, int(port), timeout=2)
                conn.request("GET", "/health")
                ok = conn.getresponse().status == 200
                conn.close()
            except OSError:
                ok = False
            backend.healthy = ok

    def _health_loop(self) -> None:
        while not self._stop.wait(1.0):
            self._check_health_once()

    def start(self) -> "LoadBalancer":
        self._check_health_once()
        self._health_thread = threading.Thread(target=self._health_loop, daemon=True)
        self._health_thread.start()
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _LbHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def lb(self) -> LoadBalancer:
        return self.server.lb  # type: ignore[attr-defined]

    def log_message(self, format, *args):
        pass

    def _sticky_value(self) -> str | None:
        cookie = self.headers.get("Cookie", "")
        name = self.lb.config.sticky_cookie_name
        for part in cookie.split(";"):
            part = part.strip()
            if part.startswith(name + "="):
                return part[len(name) + 1 :]
        return None

    def _proxy(self) -> None:
        try:
            backend = self.lb.route(self._sticky_value())
        except TransportError:
            payload = json.dumps({"error": "no-healthy-backend"}).encode()
            self.send_response(503)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return

        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length) if length else b""
        host, port = backend.address.rsplit(":", 1)
        with self.lb._lock:
            backend.outstanding += 1
        try:
            conn = http.client.HTTPConnection(host, int(port), timeout=60)
            headers = {
                k: v for k, v in self.headers.items() if k.lower() not in _HOP_BY_HOP
            }
            conn.request(self.command, self.path, body=body, headers=headers)
            response = conn.getresponse()
            data = response.read()
            conn.close()
        except OSError:
            backend.healthy = False
            payload = json.dumps({"error": "backend-unreachable"}).encode()
            self.send_response(502)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return
        finally:
            with self.lb._lock:
                backend.outstanding -= 1

        self.send_response(response.status)
        for key, value in response.getheaders():
            if key.lower() in _HOP_BY_HOP or key.lower() == "content-length":
                continue
            self.send_header(key, value)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("X-Backend", backend.instance_id)
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._proxy()

    def do_POST(self):
        self._proxy()


# --------------------------------------------------------------- cluster

def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


DEFAULT_TOKENS = {"token-a": "proj-a", "token-b": "proj-b"}
DEFAULT_ADMIN_TOKEN = "admin-token"
DEFAULT_MANIFEST = b"barbican-enclave-v1"
DEFAULT_SIGNER = b"kms-signer-public-key-v1"


@dataclass
class Cluster:
    workdir: Path
    lb: LoadBalancer
    processes: list
    instance_addresses: list
    instance_ids: list
    store_root: str
    platform_files: list
    admin_token: str
    tokens: dict
    authority_key: bytes
    client_platform_file: str
    manifest: bytes = DEFAULT_MANIFEST
    signer: bytes = DEFAULT_SIGNER

    @property
    def lb_url(self) -> str:
        return self.lb.url

    @property
    def instance_urls(self) -> list:
        return [f"http://{addr}" for addr in self.instance_addresses]

    def manifest_path(self) -> str:
        return str(self.workdir / "enclave.manifest")

    def describe(self) -> dict:
        return {
            "lb_url": self.lb_url,
            "instance_urls": self.instance_urls,
            "instance_ids": self.instance_ids,
            "store_root": self.store_root,
            "admin_token": self.admin_token,
            "tokens": self.tokens,
            "authority_key": wire.b64(self.authority_key),
            "client_platform_file": self.client_platform_file,
            "manifest_path": self.manifest_path(),
            "signer_path": str(self.workdir / "signer.pub"),
        }

    def write_manifest_file(self) -> Path:
        path = self.workdir / "cluster.json"
        path.write_text(json.dumps(self.describe(), indent=2))
        return path

    def shutdown(self) -> None:
        self.lb.shutdown()
        for proc in self.processes:
            proc.terminate()
        for proc in self.processes:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()


def _wait_health(address: str, timeout: float = 20.0) -> dict:
    host, port = address.rsplit(":", 1)
    deadline = time.time() + timeout
    last_error = None
    while time.time() < deadline:
        try:
            conn = http.client.HTTPConnection(host, int(port), timeout=2)
            conn.request("GET", "/health")
            response = conn.getresponse()
            data = json.loads(response.read())
            conn.close()
            if response.status == 200:
                return data
        except (OSError, ValueError) as exc:
            last_error = exc
        time.sleep(0.05)
    raise TransportError(f"instance at {address} never became healthy: {last_error}")


def _provision_instance(address: str, admin_token: str, authority_key: bytes, kek: bytes) -> None:
    from .client import ClientProfile, KmsClient  # local import to avoid cycle

    profile = ClientProfile(
        mode="ADMIN",
        server_url=f"http://{address}",
        token=admin_token,
        project_id="admin",
        authority_key=authority_key,
    )
    client = KmsClient(profile)
    session = client.attest()
    client.provision_kek(session, kek)


def launch_cluster(
    n: int,
    workdir: str | Path,
    kek_mode: str = "SEAL_DERIVED",
    kek: bytes | None = None,
    routing: str = "ROUND_ROBIN",
    honor_sticky: bool = True,
    tokens: dict | None = None,
    admin_token: str = DEFAULT_ADMIN_TOKEN,
    platform_files: list | None = None,
    v1_passthrough: bool = False,
) -> Cluster:
    """Spawn ``n`` instance processes over one store and put an LB in front.

    SEAL_DERIVED mode requires every instance to share one platform file
    (different platforms derive different KEKs and would shred the shared
    store); ADMIN_PROVISIONED provisions the given KEK into each instance
    over an attested admin session before the cluster is declared up.
    """
    if n < 1:
        raise ValueError("need at least one instance")
    from .server import InstanceConfig  # local import keeps module load light

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    store_root = workdir / "store"
    store_root.mkdir(exist_ok=True)
    (workdir / "configs").mkdir(exist_ok=True)

    manifest_path = workdir / "enclave.manifest"
    manifest_path.write_bytes(DEFAULT_MANIFEST)
    signer_path = workdir / "signer.pub"
    signer_path.write_bytes(DEFAULT_SIGNER)

    if platform_files is None:
        shared = workdir / "platform.json"
        if not shared.exists():
            PlatformState.generate().save(str(shared))
        platform_files = [str(shared)] * n
    if len(platform_files) == 1:
        platform_files = platform_files * n
    if len(platform_files) != n:
        raise ValueError("need one platform file, or one per instance")
    if kek_mode == "SEAL_DERIVED" and len(set(platform_files)) != 1:
        raise ValueError(
            "seal-derived KEKs require a single shared platform file; "
            "use ADMIN_PROVISIONED for mixed platforms"
        )
    if kek_mode == "ADMIN_PROVISIONED" and kek is None:
        kek = os.urandom(32)

    # one client-side platform whose quoting authority every instance trusts,
    # so enabled clients (and the MA benchmark) can attest back
    client_platform_file = workdir / "client_platform.json"
    if not client_platform_file.exists():
        PlatformState.generate().save(str(client_platform_file))
    client_authority = PlatformState.load(str(client_platform_file)).authority_public_key

    tokens = dict(tokens or DEFAULT_TOKENS)
    processes = []
    addresses = []
    instance_ids = []
    backends = []
    try:
        for index in range(n):
            instance_id = f"node{index}"
            port = free_port()
            address = f"127.0.0.1:{port}"
            config = InstanceConfig(
                instance_id=instance_id,
                listen_address=address,
                store_root=str(store_root),
                platform_file=platform_files[index],
                enclave_manifest=str(manifest_path),
                signer_key=str(signer_path),
                kek_mode=kek_mode,
                admin_token=admin_token,
                keystone_tokens=tokens,
                client_authority_keys=[wire.b64(client_authority)],
                v1_passthrough=v1_passthrough,
            )
            config_path = workdir / "configs" / f"{instance_id}.json"
            config.to_file(str(config_path))
            proc = subprocess.Popen(
                [sys.executable, "-m", "enclavekms.cli", "serve", "--config", str(config_path)],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
            )
            processes.append(proc)
            addresses.append(address)
            instance_ids.append(instance_id)
            backends.append(Backend(instance_id=instance_id, address=address))

        platform = PlatformState.load(platform_files[0])
        authority_key = platform.authority_public_key
        for address in addresses:
            _wait_health(address)
        if kek_mode == "ADMIN_PROVISIONED":
            for address, platform_file in zip(addresses, platform_files):
                instance_authority = PlatformState.load(platform_file).authority_public_key
                _provision_instance(address, admin_token, instance_authority, kek)
        for address in addresses:
            health = _wait_health(address)
            if not health.get("kek_present"):
                raise TransportError(f"instance at {address} has no KEK after launch")

        lb = LoadBalancer(
            LbConfig(backends=backends, routing=routing, honor_sticky=honor_sticky)
        ).start()
    except BaseException:
        for proc in processes:
            proc.terminate()
        raise

    return Cluster(
        workdir=workdir,
        lb=lb,
        processes=processes,
        instance_addresses=addresses,
        instance_ids=instance_ids,
        store_root=str(store_root),
        platform_files=list(platform_files),
        admin_token=admin_token,
        tokens=tokens,
        authority_key=authority_key,
        client_platform_file=str(client_platform_file),
    )


# --------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    """The metric set of the classic HTTP benchmark tool's summary block."""

    workload: str
    concurrency_level: int
    users: int
    requests_per_user: int
    completed_requests: int
    failed_requests: int
    mean_processing_time_ms: float
    mean_connect_time_ms: float
    mean_time_per_request_ms: float
    requests_per_second: float
    mean_time_across_connections_ms: float
    total_body_bytes: int
    total_time_s: float
    degraded: bool
    per_backend_requests: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _http_call(conn, method: str, path: str, body: dict | None, headers: dict) -> tuple:
    payload = json.dumps(body).encode() if body is not None else None
    send_headers = dict(headers)
    if payload is not None:
        send_headers["Content-Type"] = "application/json"
    conn.request(method, path, body=payload, headers=send_headers)
    response = conn.getresponse()
    raw = response.read()
    data = json.loads(raw) if raw else {}
    sent = len(payload) if payload else 0
    return response.status, data, response.headers, sent


class _WorkloadError(Exception):
    pass


def _expect(status: int, data: dict, accepted=(200, 201)) -> dict:
    if status not in accepted:
        raise _WorkloadError(f"HTTP {status}: {data.get('error')} {data.get('detail', '')}")
    return data


def _run_workload(conn, workload: str, ctx: dict, cookie: dict) -> tuple[int, str]:
    """Execute one workload request on an open connection.

    Returns (request_body_bytes_sent, backend_id). ``cookie`` carries the
    sticky value across calls within this workload request.
    """
    headers = {}
    if cookie.get("value"):
        headers["Cookie"] = f"{STICKY_COOKIE}={cookie['value']}"
    sent_total = 0
    backend = ""

    if workload == "V1_STORE":
        status, data, resp_headers, sent = _http_call(
            conn,
            "POST",
            "/v1/secrets",
            {
                "payload": wire.b64(os.urandom(24)),
                "name": "bench",
                "content_type": "application/octet-stream",
            },
            {**headers, "X-Auth-Token": ctx["token"]},
        )
        _expect(status, data)
        return sent, resp_headers.get("X-Backend", "")

    # v2 workloads: run the attestation handshake on this connection
    status, data, resp_headers, sent = _http_call(
        conn, "POST", "/v2/attest/start", {}, {**headers, "X-Auth-Token": ctx["token"]}
    )
    _expect(status, data)
    sent_total += sent
    backend = resp_headers.get("X-Backend", "")
    set_cookie = resp_headers.get("Set-Cookie", "")
    if set_cookie.startswith(STICKY_COOKIE + "="):
        cookie["value"] = set_cookie[len(STICKY_COOKIE) + 1 :].split(";")[0]
        headers["Cookie"] = f"{STICKY_COOKIE}={cookie['value']}"

    msg1 = att.message_from_dict(data["msg1"])
    session, msg2 = att.challenger_process_msg1(msg1)
    status, data, resp_headers, sent = _http_call(
        conn, "POST", "/v2/attest/msg2", {"msg2": att.message_to_dict(msg2)}, headers
    )
    _expect(status, data)
    sent_total += sent
    msg3 = att.message_from_dict(data["msg3"])
    att.challenger_process_msg3(session, msg3, ctx["authority_key"])

    if workload == "V2_RA_STORE":
        status, data, resp_headers, sent = _http_call(
            conn,
            "POST",
            "/v2/attest/msg4",
            {"msg4": att.message_to_dict(att.Msg4(session_id=session.session_id, status="OK"))},
            headers,
        )
        _expect(status, data)
        sent_total += sent
        sk = session.negotiated_sk
    else:  # V2_MA_ROUNDTRIP
        s_msg4 = att.client_build_s_msg4(session, ctx["enclave"], ctx["project_id"])
        status, data, resp_headers, sent = _http_call(
            conn, "POST", "/v2/attest/msg4", {"s_msg4": att.message_to_dict(s_msg4)}, headers
        )
        _expect(status, data)
        sent_total += sent
        reverse_msg2 = att.message_from_dict(data["msg2"])
        reverse_msg3 = att.responder_process_msg2(
            session.reverse, reverse_msg2, ctx["enclave"], ctx["enclave"].platform
        )
        status, data, resp_headers, sent = _http_call(
            conn,
            "POST",
            "/v2/attest/ma_msg3",
            {"session_id": session.session_id.hex(), "msg3": att.message_to_dict(reverse_msg3)},
            headers,
        )
        _expect(status, data)
        sent_total += sent
        sk = att.client_process_c_msg4(session, att.message_from_dict(data["c_msg4"]))

    secret = os.urandom(24)
    status, data, resp_headers, sent = _http_call(
        conn,
        "POST",
        "/v2/secrets",
        {
            "session_id": session.session_id.hex(),
            "sk_secret": wire.b64(encrypt_under_sk(sk, secret)),
            "name": "bench",
            "content_type": "application/octet-stream",
        },
        headers,
    )
    _expect(status, data)
    sent_total += sent

    if workload == "V2_MA_ROUNDTRIP":
        ref = data["secret_ref"]
        status, data, resp_headers, sent = _http_call(
            conn, "GET", f"/v2/secrets/{ref}?session_id={session.session_id.hex()}", None, headers
        )
        _expect(status, data)
        roundtrip = decrypt_under_sk(sk, wire.unb64(data["sk_secret"]))
        if roundtrip != secret:
            raise _WorkloadError("roundtrip mismatch")

    return sent_total, backend


def _bench_user(args: dict) -> list:
    """One user stream: ``concurrency`` threads sharing a request quota."""
    host, port = args["target"].rsplit(":", 1)
    ctx = {
        "token": args["token"],
        "project_id": args["project_id"],
        "authority_key": bytes.fromhex(args["authority_key_hex"]),
    }
    if args["workload"] == "V2_MA_ROUNDTRIP":
        platform = PlatformState.load(args["client_platform_file"])
        ctx["enclave"] = load_enclave(
            bytes.fromhex(args["manifest_hex"]), bytes.fromhex(args["signer_hex"]), 1, platform
        )

    rows = []
    rows_lock = threading.Lock()
    counter = {"next": 0}

    def worker() -> None:
        while True:
            with rows_lock:
                index = counter["next"]
                if index >= args["requests_per_user"]:
                    return
                counter["next"] = index + 1
            row = {
                "user": args["user_index"],
                "request": index,
                "connect_ms": 0.0,
                "processing_ms": 0.0,
                "total_ms": 0.0,
                "ok": False,
                "bytes_sent": 0,
                "backend": "",
            }
            conn = http.client.HTTPConnection(host, int(port), timeout=60)
            try:
                t0 = time.perf_counter()
                conn.connect()
                t1 = time.perf_counter()
                sent, backend = _run_workload(conn, args["workload"], ctx, {})
                t2 = time.perf_counter()
                row.update(
                    connect_ms=(t1 - t0) * 1000.0,
                    processing_ms=(t2 - t1) * 1000.0,
                    total_ms=(t2 - t0) * 1000.0,
                    ok=True,
                    bytes_sent=sent,
                    backend=backend,
                )
            except (_WorkloadError, KmsError, OSError, ValueError) as exc:
                row["error"] = str(exc)
            finally:
                conn.close()
            with rows_lock:
                rows.append(row)

    threads = [threading.Thread(target=worker) for _ in range(args["concurrency"])]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    return rows


def read_request_logs(store_root: str | Path) -> dict:
    """Summarize the instances' structured request logs under a shared store.

    Returns per-instance request counts and mean server-side processing time,
    so benchmark reports can pair client-observed latencies with what each
    backend actually did.
    """
    summary: dict = {}
    log_dir = Path(store_root) / "_logs"
    for log_file in sorted(log_dir.glob("*.jsonl")) if log_dir.exists() else []:
        durations = []
        for line in log_file.read_text().splitlines():
            try:
                entry = json.loads(line)
            except ValueError:
                continue
            durations.append(float(entry.get("duration_ms", 0.0)))
        if durations:
            summary[log_file.stem] = {
                "requests": len(durations),
                "mean_duration_ms": round(sum(durations) / len(durations), 3),
            }
    return summary


def bench(
    target_url: str,
    users: int,
    concurrency: int,
    requests_per_user: int,
    workload: str,
    *,
    token: str,
    project_id: str,
    authority_key: bytes,
    client_platform_file: str | None = None,
    manifest: bytes = DEFAULT_MANIFEST,
    signer: bytes = DEFAULT_SIGNER,
) -> tuple[BenchReport, list]:
    """Drive ``users`` parallel streams against an LB or a bare instance.

    Returns the summary report plus the per-request latency rows.
    """
    if workload not in WORKLOADS:
        raise ValueError(f"unknown workload {workload!r}")
    target = target_url.removeprefix("http://").rstrip("/")

    worker_args = [
        {
            "target": target,
            "user_index": index,
            "concurrency": max(1, concurrency),
            "requests_per_user": requests_per_user,
            "workload": workload,
            "token": token,
            "project_id": project_id,
            "authority_key_hex": authority_key.hex(),
            "client_platform_file": client_platform_file or "",
            "manifest_hex": manifest.hex(),
            "signer_hex": signer.hex(),
        }
        for index in range(users)
    ]

    started = time.perf_counter()
    if not worker_args or requests_per_user <= 0:
        rows = []
    elif len(worker_args) == 1:
        rows = _bench_user(worker_args[0])
    else:
        context = multiprocessing.get_context("fork")
        with context.Pool(processes=len(worker_args)) as pool:
            rows = [row for chunk in pool.map(_bench_user, worker_args) for row in chunk]
    total_time_s = time.perf_counter() - started

    completed = [row for row in rows if row["ok"]]
    failed = len(rows) - len(completed)

    def mean(key: str) -> float:
        return sum(row[key] for row in completed) / len(completed) if completed else 0.0

    mean_total = mean("total_ms")
    per_backend: dict = {}
    for row in completed:
        if row["backend"]:
            per_backend[row["backend"]] = per_backend.get(row["backend"], 0) + 1

    report = BenchReport(
        workload=workload,
        concurrency_level=concurrency,
        users=users,
        requests_per_user=requests_per_user,
        completed_requests=len(completed),
        failed_requests=failed,
        mean_processing_time_ms=mean("processing_ms"),
        mean_connect_time_ms=mean("connect_ms"),
        mean_time_per_request_ms=mean_total,
        requests_per_second=(len(completed) / total_time_s) if total_time_s > 0 and completed else 0.0,
        mean_time_across_connections_ms=mean_total / concurrency if concurrency > 0 else 0.0,
        total_body_bytes=sum(row["bytes_sent"] for row in completed),
        total_time_s=total_time_s,
        degraded=failed > 0,
        per_backend_requests=per_backend,
    )
    return report, rows
