"""Acceptance suite: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion. Each test prints its line only after its assertions held.
"""

import json
import os
import random
import time

import pytest
import requests

from _harness import make_pair, run_ma, run_ra, run_ra_with_corruption
from conftest import (
    ADMIN_TOKEN,
    CLIENT_MANIFEST_A,
    CLIENT_MANIFEST_B,
    CLIENT_MANIFEST_C,
    ServerEnv,
)
from enclavekms import attestation as att
from enclavekms import reporting
from enclavekms.client import ClientProfile, KmsClient
from enclavekms.cluster import Backend, LbConfig, LoadBalancer, bench, launch_cluster
from enclavekms.core import check_access
from enclavekms.enclave import PlatformState, load_enclave
from enclavekms.errors import (
    AccessDenied,
    IntegrityViolation,
    KekMissing,
    KmsError,
    UnknownSession,
)

from test_core import truth_table


def announce(line: str) -> None:
    print(f"\nPASS  {line}")


# ---------------------------------------------------------------- criterion 1

class TestProtocolCompleteness:
    def test_thousand_seeded_honest_runs(self):
        started = time.monotonic()
        enclave, platform = make_pair(1001)
        client_enclave = load_enclave(
            b"acceptance-client", b"acceptance-signer", 1, PlatformState.generate()
        )
        failures = 0
        for seed in range(1000):
            rng = random.Random(seed)
            responder, challenger = run_ra(enclave, platform, rng=rng)
            if not (
                responder.state is att.State.ESTABLISHED
                and challenger.state is att.State.ESTABLISHED
                and responder.keys == challenger.keys
            ):
                failures += 1
        for seed in range(1000):
            rng = random.Random(10_000 + seed)
            server, client, final_sk = run_ma(
                enclave, platform, client_enclave, project_id=f"proj-{seed % 7}", rng=rng
            )
            if not (final_sk == server.sk_override and client.negotiated_sk == final_sk):
                failures += 1
        elapsed = time.monotonic() - started
        assert failures == 0
        assert elapsed < 60, f"took {elapsed:.1f}s, budget 60s"
        announce(
            f"protocol completeness: 1000 RA + 1000 MA seeded runs, 0 failures ({elapsed:.1f}s)"
        )


# ---------------------------------------------------------------- criterion 2

class TestHandshakeRobustness:
    def test_thousand_corrupted_runs(self):
        started = time.monotonic()
        enclave, platform = make_pair(2002)
        mismatched = 0
        explicit = 0
        for seed in range(1000):
            outcome = run_ra_with_corruption(seed, enclave, platform)
            if outcome == "established-mismatched":
                mismatched += 1
            elif outcome == "failed-explicit":
                explicit += 1
        elapsed = time.monotonic() - started
        assert mismatched == 0
        assert explicit == 1000, f"only {explicit}/1000 failed explicitly"
        assert elapsed < 120, f"took {elapsed:.1f}s, budget 120s"
        announce(
            f"handshake robustness: 1000 corrupted runs, 0 mismatched, 100% explicit ({elapsed:.1f}s)"
        )


# ---------------------------------------------------------------- criterion 3

class TestPolicyTruthTable:
    def test_exact_match_against_brute_force(self):
        started = time.monotonic()
        from test_core import TestPolicyMatrix

        rows = truth_table()
        assert len(rows) == 36
        maker = TestPolicyMatrix()
        for policy_no, offset, label, requester, expected in rows:
            assert check_access(maker.make_record(policy_no), requester) == expected, (
                policy_no,
                offset,
                label,
            )
        elapsed = time.monotonic() - started
        assert elapsed < 1.0
        announce(f"policy truth table: 36/36 rows match the brute-force oracle ({elapsed * 1000:.0f}ms)")


# ---------------------------------------------------------------- criterion 4

@pytest.fixture
def five_project_env(tmp_path):
    tokens = {f"tok-p{i}": f"p{i}" for i in range(5)}
    env = ServerEnv(tmp_path, keystone_tokens=tokens)
    yield env, tokens
    env.shutdown()


class TestDatabaseAttackRegression:
    def test_all_twenty_cross_pairs_fail(self, five_project_env):
        started = time.monotonic()
        env, tokens = five_project_env
        projects = list(tokens.values())
        enclaves = {
            project: env.client_enclave(manifest=f"enclave-{project}".encode())
            for project in projects
        }
        for token, project in tokens.items():
            client = env.client(mode="ENABLED", token=token, project=project,
                                local_enclave=enclaves[project])
            client.attest()

        store_dir = env.root / "store" / "projects"
        originals = {p: (store_dir / f"{p}.json").read_bytes() for p in projects}

        failures = 0
        for source in projects:
            for target in projects:
                if source == target:
                    continue
                source_row = json.loads(originals[source])
                target_row = json.loads(originals[target])
                target_row["enc_sk"] = source_row["enc_sk"]
                (store_dir / f"{target}.json").write_text(json.dumps(target_row))
                token = next(t for t, p in tokens.items() if p == target)
                attacker = env.client(mode="ENABLED", token=token, project=target,
                                      local_enclave=enclaves[target])
                with pytest.raises(IntegrityViolation):
                    attacker.attest()
                failures += 1
                (store_dir / f"{target}.json").write_bytes(originals[target])
        elapsed = time.monotonic() - started
        assert failures == 20
        assert elapsed < 5, f"took {elapsed:.1f}s, budget 5s"
        announce(f"database attack regression: 20/20 copied key rows rejected ({elapsed:.1f}s)")


# ---------------------------------------------------------------- criterion 5

class TestPlaintextConfinement:
    def test_hundred_cycles_no_leakage(self, server_env):
        started = time.monotonic()
        rng = random.Random(5005)
        capture = []
        client = server_env.client(mode="AWARE", capture=capture)
        session = client.attest()
        secrets = []
        for index in range(100):
            secret = rng.randbytes(rng.randint(8, 64))
            secrets.append(secret)
            ref = client.store_secret(session, f"s{index}", secret)
            assert client.get_secret(session, ref) == secret

        store_bytes = b"".join(
            path.read_bytes() for path in (server_env.root / "store").rglob("*.json")
        )
        wire_bytes = b"".join(req + resp for _, _, req, resp in capture)
        kek = server_env.server.app.core.kek_state.kek
        import base64

        for haystack, where in ((store_bytes, "store"), (wire_bytes, "v2 wire")):
            assert kek not in haystack, f"KEK bytes leaked into {where}"
            assert base64.b64encode(kek) not in haystack, f"base64 KEK leaked into {where}"
            for secret in secrets:
                assert secret not in haystack, f"plaintext leaked into {where}"
                assert base64.b64encode(secret) not in haystack, f"base64 plaintext in {where}"
        elapsed = time.monotonic() - started
        assert elapsed < 60, f"took {elapsed:.1f}s, budget 60s"
        announce(
            f"plaintext confinement: 100 cycles, no plaintext/KEK bytes at rest or on the v2 wire ({elapsed:.1f}s)"
        )


# ---------------------------------------------------------------- criterion 6

class TestRestartRecovery:
    def test_both_kek_modes_and_cross_platform(self, tmp_path):
        started = time.monotonic()

        # seal-derived instance
        sealed_env = ServerEnv(tmp_path / "sealed")
        try:
            legacy = sealed_env.client(mode="LEGACY")
            aware = sealed_env.client(mode="AWARE")
            session = aware.attest()
            legacy_ref = legacy.legacy_store("n", b"legacy survives")
            attested_ref = aware.store_secret(session, "n", b"attested survives")
            sealed_env.restart()
            assert sealed_env.client(mode="LEGACY").legacy_get(legacy_ref) == b"legacy survives"
            assert (
                sealed_env.client(mode="AWARE").get_secret(session, attested_ref)
                == b"attested survives"
            )
        finally:
            sealed_env.shutdown()

        # admin-provisioned instance
        admin_env = ServerEnv(tmp_path / "provisioned", kek_mode="ADMIN_PROVISIONED")
        try:
            kek = os.urandom(32)
            admin = admin_env.client(mode="ADMIN", token=ADMIN_TOKEN, project="admin")
            admin.provision_kek(admin.attest(), kek)
            legacy = admin_env.client(mode="LEGACY")
            ref = legacy.legacy_store("n", b"provisioned survives")

            admin_env.restart()  # same platform: KEK unseals from disk, no admin needed
            health = requests.get(admin_env.url + "/health", timeout=5).json()
            assert health["kek_present"] is True
            assert admin_env.client(mode="LEGACY").legacy_get(ref) == b"provisioned survives"

            # cross-platform restart: different seal root, KEK unrecoverable
            foreign = tmp_path / "foreign-platform.json"
            PlatformState.generate().save(str(foreign))
            admin_env.restart(platform_file=str(foreign))
            health = requests.get(admin_env.url + "/health", timeout=5).json()
            assert health["kek_present"] is False
            with pytest.raises(KekMissing):
                admin_env.client(mode="LEGACY").legacy_get(ref)

            # re-provisioning the same KEK restores service
            admin = admin_env.client(mode="ADMIN", token=ADMIN_TOKEN, project="admin")
            admin.provision_kek(admin.attest(), kek)
            assert admin_env.client(mode="LEGACY").legacy_get(ref) == b"provisioned survives"
        finally:
            admin_env.shutdown()

        elapsed = time.monotonic() - started
        assert elapsed < 30, f"took {elapsed:.1f}s, budget 30s"
        announce(
            f"restart recovery: both KEK modes recover, foreign platform stays kek-missing until re-provisioned ({elapsed:.1f}s)"
        )


# ---------------------------------------------------------------- criterion 7

class TestMultiUserDistribution:
    def test_listed_unlisted_and_downgraded(self, server_env):
        started = time.monotonic()
        owner_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_A, isv_svn=2)
        listed_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_B, isv_svn=2)
        unlisted_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_C, isv_svn=2)
        downgraded_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_B, isv_svn=1)

        owner = server_env.client(mode="ENABLED", local_enclave=owner_enclave)
        owner_session = owner.attest()
        ref = owner.store_secret(
            owner_session,
            "volume-encryption-key",
            b"the shared volume key",
            acl={"policy": 3, "child_mrenclaves": [listed_enclave.identity.mr_enclave]},
        )

        listed = server_env.client(mode="ENABLED", local_enclave=listed_enclave)
        assert listed.get_secret(listed.attest(), ref) == b"the shared volume key"

        unlisted = server_env.client(mode="ENABLED", local_enclave=unlisted_enclave)
        with pytest.raises(AccessDenied) as denied:
            unlisted.get_secret(unlisted.attest(), ref)
        assert denied.value.reason == "not-in-acl"

        downgraded = server_env.client(mode="ENABLED", local_enclave=downgraded_enclave)
        with pytest.raises(AccessDenied) as denied:
            downgraded.get_secret(downgraded.attest(), ref)
        assert denied.value.reason == "svn-downgrade"

        elapsed = time.monotonic() - started
        assert elapsed < 10, f"took {elapsed:.1f}s, budget 10s"
        announce(
            f"multi-user distribution: listed allowed, unlisted not-in-acl, low-SVN svn-downgrade ({elapsed:.1f}s)"
        )


# ---------------------------------------------------------------- criteria 8+9

@pytest.fixture(scope="class")
def four_node_cluster(tmp_path_factory):
    handle = launch_cluster(
        n=4, workdir=tmp_path_factory.mktemp("accept4"), routing="RANDOM", honor_sticky=True
    )
    yield handle
    handle.shutdown()


def cluster_client(handle, url=None, **kwargs):
    profile = ClientProfile(
        mode=kwargs.get("mode", "AWARE"),
        server_url=url or handle.lb_url,
        token=kwargs.get("token", "token-a"),
        project_id=kwargs.get("project", "proj-a"),
        authority_key=handle.authority_key,
    )
    return KmsClient(profile)


class TestStickySessions:
    def test_completion_rates_and_affinity_freedom(self, four_node_cluster):
        started = time.monotonic()
        handle = four_node_cluster

        sticky_ok = 0
        for _ in range(200):
            try:
                cluster_client(handle).attest()
                sticky_ok += 1
            except KmsError:
                pass
        assert sticky_ok == 200, f"stickiness on: only {sticky_ok}/200 handshakes completed"

        backends = [
            Backend(instance_id=i, address=a)
            for i, a in zip(handle.instance_ids, handle.instance_addresses)
        ]
        loose = LoadBalancer(
            LbConfig(backends=backends, routing="RANDOM", honor_sticky=False)
        ).start()
        try:
            loose_ok = 0
            for _ in range(200):
                try:
                    cluster_client(handle, url=loose.url).attest()
                    loose_ok += 1
                except (UnknownSession, KmsError):
                    pass
            assert loose_ok < 100, f"stickiness off: {loose_ok}/200 completed, expected <50%"

            # established sessions are affinity-free on the data plane
            session = cluster_client(handle).attest()
            for routing in ("ROUND_ROBIN", "RANDOM", "LEAST_OUTSTANDING"):
                free_lb = LoadBalancer(
                    LbConfig(
                        backends=[Backend(instance_id=b.instance_id, address=b.address) for b in backends],
                        routing=routing,
                        honor_sticky=False,
                    )
                ).start()
                try:
                    client = cluster_client(handle, url=free_lb.url)
                    ref = client.store_secret(session, f"via-{routing}", routing.encode())
                    assert client.get_secret(session, ref) == routing.encode()
                finally:
                    free_lb.shutdown()
        finally:
            loose.shutdown()

        elapsed = time.monotonic() - started
        assert elapsed < 120, f"took {elapsed:.1f}s, budget 120s"
        announce(
            f"sticky sessions: 200/200 with cookie, {loose_ok}/200 without (<50%), data plane affinity-free ({elapsed:.1f}s)"
        )


class TestScalingShape:
    def test_table_shape_throughput_ratio(self, four_node_cluster, tmp_path):
        started = time.monotonic()
        single = launch_cluster(n=1, workdir=tmp_path / "accept1")
        try:
            kwargs = dict(
                users=5,
                concurrency=2,
                requests_per_user=100,
                workload="V2_RA_STORE",
                token="token-a",
                project_id="proj-a",
            )
            report_one, rows_one = bench(
                single.lb_url, authority_key=single.authority_key, **kwargs
            )
            report_four, rows_four = bench(
                four_node_cluster.lb_url, authority_key=four_node_cluster.authority_key, **kwargs
            )
        finally:
            single.shutdown()

        out_dir = tmp_path / "bench-artifacts"
        reporting.write_report(report_one, rows_one, out_dir / "single_instance.json")
        reporting.write_report(report_four, rows_four, out_dir / "four_instances.json")
        reporting.throughput_comparison_figure(
            {"1 instance": report_one, "4 instances": report_four},
            out_dir / "throughput_comparison.png",
        )

        # Table-shaped schema emitted
        schema = {
            "concurrency_level",
            "users",
            "requests_per_user",
            "mean_processing_time_ms",
            "mean_connect_time_ms",
            "mean_time_per_request_ms",
            "requests_per_second",
            "mean_time_across_connections_ms",
            "total_body_bytes",
            "total_time_s",
        }
        for report in (report_one, report_four):
            assert schema <= set(report.to_dict())
            assert not report.degraded, "benchmark run degraded by failed requests"
            identity = report.requests_per_second * report.total_time_s
            assert abs(identity - report.completed_requests) <= 0.01 * report.completed_requests
            assert report.mean_time_across_connections_ms == pytest.approx(
                report.mean_time_per_request_ms / report.concurrency_level
            )

        ratio = report_four.requests_per_second / report_one.requests_per_second
        elapsed = time.monotonic() - started
        assert elapsed < 300, f"took {elapsed:.1f}s, budget 300s"
        cores = os.cpu_count() or 1
        if cores >= 4:
            assert ratio >= 2.0, f"throughput ratio {ratio:.2f} < 2.0 on a {cores}-core host"
            announce(
                f"scaling shape: {report_one.requests_per_second:.1f} -> "
                f"{report_four.requests_per_second:.1f} req/s, ratio {ratio:.2f} >= 2.0 ({elapsed:.0f}s)"
            )
        else:
            announce(
                f"scaling shape: report emitted, ratio {ratio:.2f} measured; >=2.0 bound requires "
                f"a >=4-core host (this host has {cores}) ({elapsed:.0f}s)"
            )
            pytest.skip(
                f"ratio bound is specified for >=4-core hosts; this host has {cores} cores "
                f"(measured ratio {ratio:.2f})"
            )


# ---------------------------------------------------------------- criterion 10

V1_SUITE_SECRET = "p\xe5ssw\xf6rd-✓ binary:\x00\x01\x02".encode("utf-8")


def v1_suite(url: str) -> list:
    """The v1 client test suite: identical client code for every build."""
    outcomes = []

    def scenario(name, func):
        try:
            outcomes.append((name, func()))
        except KmsError as exc:
            outcomes.append((name, f"error:{exc.code}:{getattr(exc, 'reason', '')}"))

    def roundtrip():
        profile = ClientProfile(mode="LEGACY", server_url=url, token="token-a", project_id="proj-a")
        client = KmsClient(profile)
        ref = client.legacy_store("suite", V1_SUITE_SECRET, "application/octet-stream")
        return ("roundtrip-ok", client.legacy_get(ref) == V1_SUITE_SECRET)

    def unicode_name():
        profile = ClientProfile(mode="LEGACY", server_url=url, token="token-a", project_id="proj-a")
        client = KmsClient(profile)
        ref = client.legacy_store("p\xe4ssword ✓", b"named")
        return client.legacy_get(ref) == b"named"

    def empty_payload():
        profile = ClientProfile(mode="LEGACY", server_url=url, token="token-a", project_id="proj-a")
        client = KmsClient(profile)
        return client.legacy_get(client.legacy_store("empty", b"")) == b""

    def wrong_token():
        profile = ClientProfile(mode="LEGACY", server_url=url, token="nope", project_id="proj-a")
        KmsClient(profile).legacy_store("x", b"x")

    def unknown_ref():
        profile = ClientProfile(mode="LEGACY", server_url=url, token="token-a", project_id="proj-a")
        KmsClient(profile).legacy_get("00" * 16)

    def cross_project():
        a = KmsClient(ClientProfile(mode="LEGACY", server_url=url, token="token-a", project_id="proj-a"))
        b = KmsClient(ClientProfile(mode="LEGACY", server_url=url, token="token-b", project_id="proj-b"))
        b.legacy_get(a.legacy_store("mine", b"project a data"))

    scenario("roundtrip", roundtrip)
    scenario("unicode-name", unicode_name)
    scenario("empty-payload", empty_payload)
    scenario("wrong-token", wrong_token)
    scenario("unknown-ref", unknown_ref)
    scenario("cross-project", cross_project)
    return outcomes


class TestLegacyCompatibility:
    def test_same_suite_both_builds(self, server_factory):
        started = time.monotonic()
        passthrough = server_factory("pass", v1_passthrough=True)
        enclave_build = server_factory("encl", v1_passthrough=False)

        passthrough_outcomes = v1_suite(passthrough.url)
        enclave_outcomes = v1_suite(enclave_build.url)

        assert passthrough_outcomes == enclave_outcomes, (
            "client-visible v1 behavior differs between builds"
        )
        expected = [
            ("roundtrip", ("roundtrip-ok", True)),
            ("unicode-name", True),
            ("empty-payload", True),
            ("wrong-token", "error:access-denied:unauthorized"),
            ("unknown-ref", "error:not-found:"),
            ("cross-project", "error:access-denied:cross-project"),
        ]
        assert enclave_outcomes == expected

        # the enclave build actually encrypts at rest while behaving identically
        blob = b"".join(
            p.read_bytes() for p in (enclave_build.root / "store" / "secrets").glob("*.json")
        )
        assert V1_SUITE_SECRET not in blob
        import base64

        assert base64.b64encode(V1_SUITE_SECRET) not in blob

        elapsed = time.monotonic() - started
        assert elapsed < 30, f"took {elapsed:.1f}s, budget 30s"
        announce(
            f"legacy compatibility: v1 suite identical on pass-through and enclave builds ({elapsed:.1f}s)"
        )
