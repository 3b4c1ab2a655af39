"""Client behavior: mode flows, identity pinning, abort-on-failure invariants."""

import json

import pytest

from conftest import CLIENT_MANIFEST_B, CLIENT_MANIFEST_C
from enclavekms.errors import (
    AccessDenied,
    AttestationRequired,
    IdentityRejected,
    KmsError,
    TransportError,
)


class TestLegacyClient:
    def test_roundtrip(self, server_env):
        client = server_env.client(mode="LEGACY")
        ref = client.legacy_store("name", b"legacy payload")
        assert client.legacy_get(ref) == b"legacy payload"

    def test_wrong_token_surfaced(self, server_env):
        client = server_env.client(mode="LEGACY", token="nonsense")
        with pytest.raises(AccessDenied) as excinfo:
            client.legacy_store("n", b"x")
        assert excinfo.value.reason == "unauthorized"

    def test_foreign_project_ref_surfaced(self, server_env):
        ref = server_env.client(mode="LEGACY").legacy_store("n", b"a's data")
        other = server_env.client(mode="LEGACY", token="token-b", project="proj-b")
        with pytest.raises(AccessDenied):
            other.legacy_get(ref)

    def test_unreachable_server_is_transport_error(self, server_env):
        client = server_env.client(mode="LEGACY")
        client.profile.server_url = "http://127.0.0.1:9"  # discard port
        with pytest.raises(TransportError):
            client.legacy_store("n", b"x")


class TestAwareClient:
    def test_attest_and_roundtrip(self, server_env):
        client = server_env.client(mode="AWARE")
        session = client.attest()
        assert session.mode == "RA"
        ref = client.store_secret(session, "k", b"attested bytes")
        assert client.get_secret(session, ref) == b"attested bytes"

    def test_correct_pin_accepted(self, server_env):
        expected = server_env.server.app.enclave.identity
        client = server_env.client(mode="AWARE", expect_mrenclave=expected.mr_enclave)
        assert client.attest().server_identity.mr_enclave == expected.mr_enclave

    def test_wrong_measurement_pin_rejected(self, server_env):
        client = server_env.client(mode="AWARE", expect_mrenclave=b"\x00" * 32)
        with pytest.raises(IdentityRejected):
            client.attest()

    def test_wrong_signer_pin_rejected(self, server_env):
        client = server_env.client(mode="AWARE", expect_mrsigner=b"\x11" * 32)
        with pytest.raises(IdentityRejected):
            client.attest()

    def test_sticky_cookie_replayed_on_handshake(self, server_env):
        capture = []
        client = server_env.client(mode="AWARE", capture=capture)
        client.attest()
        assert client.http.cookies.get("barbie_node") == "srv1"


class TestEnabledClient:
    def test_ma_session_carries_identity_server_side(self, server_env):
        enclave = server_env.client_enclave()
        client = server_env.client(mode="ENABLED", local_enclave=enclave)
        session = client.attest()
        # default policy 1: only the owner measurement may retrieve
        ref = client.store_secret(session, "self", b"owner-only")
        assert client.get_secret(session, ref) == b"owner-only"

        imposter_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_B)
        imposter = server_env.client(mode="ENABLED", local_enclave=imposter_enclave)
        imposter_session = imposter.attest()
        with pytest.raises(AccessDenied) as excinfo:
            imposter.get_secret(imposter_session, ref)
        assert excinfo.value.reason == "measurement-mismatch"

    def test_multi_user_distribution(self, server_env):
        owner_enclave = server_env.client_enclave()
        child_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_B)
        stranger_enclave = server_env.client_enclave(manifest=CLIENT_MANIFEST_C)

        owner = server_env.client(mode="ENABLED", local_enclave=owner_enclave)
        owner_session = owner.attest()
        ref = owner.store_secret(
            owner_session,
            "volume-key",
            b"shared volume key",
            acl={"policy": 3, "child_mrenclaves": [child_enclave.identity.mr_enclave]},
        )

        child = server_env.client(mode="ENABLED", local_enclave=child_enclave)
        child_session = child.attest()
        assert child.get_secret(child_session, ref) == b"shared volume key"

        stranger = server_env.client(mode="ENABLED", local_enclave=stranger_enclave)
        stranger_session = stranger.attest()
        with pytest.raises(AccessDenied) as excinfo:
            stranger.get_secret(stranger_session, ref)
        assert excinfo.value.reason == "not-in-acl"

    def test_traffic_key_is_the_delivered_one_not_dh(self, server_env, monkeypatch):
        from enclavekms import attestation as att

        observed = {}
        original = att.client_process_c_msg4

        def spy(session, c_msg4):
            observed["dh_sk"] = session.keys.sk
            observed["delivered"] = original(session, c_msg4)
            return observed["delivered"]

        monkeypatch.setattr(att, "client_process_c_msg4", spy)
        client = server_env.client(mode="ENABLED", local_enclave=server_env.client_enclave())
        session = client.attest()
        assert session.sk == observed["delivered"]
        assert session.sk != observed["dh_sk"]
        # and that key really carries the data plane
        ref = client.store_secret(session, "traffic", b"under the delivered key")
        assert client.get_secret(session, ref) == b"under the delivered key"

    def test_ra_session_cannot_fetch_ma_secret(self, server_env):
        owner = server_env.client(mode="ENABLED", local_enclave=server_env.client_enclave())
        session = owner.attest()
        ref = owner.store_secret(session, "ma", b"needs attestation")
        aware = server_env.client(mode="AWARE")
        aware_session = aware.attest()
        with pytest.raises(AttestationRequired):
            aware.get_secret(aware_session, ref)


class _Tamperer:
    """Wraps KmsClient._request to corrupt a chosen protocol step."""

    def __init__(self, client, step: str):
        self.inner = client._request
        self.step = step
        client._request = self.__call__

    def __call__(self, method, path, body=None, token=False):
        # mutate requests on the way out
        if body is not None and self.step == "msg2" and path == "/v2/attest/msg2":
            corrupted = json.loads(json.dumps(body))
            corrupted["msg2"]["mac"] = "AAAA" + corrupted["msg2"]["mac"][4:]
            return self.inner(method, path, corrupted, token)
        if body is not None and self.step == "s_msg4" and path == "/v2/attest/msg4":
            corrupted = json.loads(json.dumps(body))
            payload = corrupted["s_msg4"]["payload"]
            corrupted["s_msg4"]["payload"] = ("BBBB" + payload[4:]) if payload[:4] != "BBBB" else ("CCCC" + payload[4:])
            return self.inner(method, path, corrupted, token)
        response = self.inner(method, path, body, token)
        # mutate responses on the way in
        if self.step == "msg3" and path == "/v2/attest/msg2":
            quote = response["msg3"]["quote"]
            response["msg3"]["quote"] = ("AAAA" + quote[4:]) if quote[:4] != "AAAA" else ("BBBB" + quote[4:])
        if self.step == "c_msg4" and path == "/v2/attest/ma_msg3":
            payload = response["c_msg4"]["payload"]
            response["c_msg4"]["payload"] = ("AAAA" + payload[4:]) if payload[:4] != "AAAA" else ("BBBB" + payload[4:])
        return response


class TestEnabledAbortInvariant:
    @pytest.mark.parametrize("step", ["msg2", "msg3", "s_msg4", "c_msg4"])
    def test_no_secret_transmitted_when_ma_fails(self, server_env, step):
        capture = []
        enclave = server_env.client_enclave()
        client = server_env.client(mode="ENABLED", local_enclave=enclave, capture=capture)
        _Tamperer(client, step)
        with pytest.raises(KmsError):
            session = client.attest()
            client.store_secret(session, "never", b"must never leave")  # pragma: no cover
        secret_posts = [entry for entry in capture if entry[1] == "/v2/secrets"]
        assert secret_posts == []
        for _, _, request_bytes, _ in capture:
            assert b"must never leave" not in request_bytes
