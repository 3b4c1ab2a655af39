"""Shared fixtures: platforms, enclaves, and a live single-instance server."""

from __future__ import annotations

import pytest

from enclavekms import wire
from enclavekms.client import ClientProfile, KmsClient
from enclavekms.cluster import free_port
from enclavekms.enclave import EnclaveHandle, PlatformState, load_enclave
from enclavekms.server import InstanceConfig, KmsServer

SERVER_MANIFEST = b"barbican-enclave-v1"
SERVER_SIGNER = b"kms-signer-public-key-v1"
CLIENT_MANIFEST_A = b"client-enclave-alpha"
CLIENT_MANIFEST_B = b"client-enclave-beta"
CLIENT_MANIFEST_C = b"client-enclave-gamma"
CLIENT_SIGNER = b"client-signer-public-key"
TOKENS = {"token-a": "proj-a", "token-b": "proj-b"}
ADMIN_TOKEN = "admin-token"


@pytest.fixture
def platform() -> PlatformState:
    return PlatformState.generate()


@pytest.fixture
def enclave(platform) -> EnclaveHandle:
    return load_enclave(SERVER_MANIFEST, SERVER_SIGNER, 1, platform)


class ServerEnv:
    """One in-process server instance plus everything a client needs."""

    def __init__(self, root, **config_overrides):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.platform_file = str(root / "platform.json")
        if not (root / "platform.json").exists():
            PlatformState.generate().save(self.platform_file)
        self.client_platform = PlatformState.generate()
        self.client_platform_file = str(root / "client_platform.json")
        self.client_platform.save(self.client_platform_file)
        (root / "enclave.manifest").write_bytes(SERVER_MANIFEST)
        (root / "signer.pub").write_bytes(SERVER_SIGNER)
        defaults = dict(
            instance_id="srv1",
            listen_address=f"127.0.0.1:{free_port()}",
            store_root=str(root / "store"),
            platform_file=self.platform_file,
            enclave_manifest=str(root / "enclave.manifest"),
            signer_key=str(root / "signer.pub"),
            kek_mode="SEAL_DERIVED",
            admin_token=ADMIN_TOKEN,
            keystone_tokens=dict(TOKENS),
            client_authority_keys=[wire.b64(self.client_platform.authority_public_key)],
        )
        defaults.update(config_overrides)
        self.config = InstanceConfig(**defaults)
        self.server = KmsServer(self.config).start_background()

    @property
    def url(self) -> str:
        return f"http://{self.server.address}"

    @property
    def authority_key(self) -> bytes:
        return PlatformState.load(self.config.platform_file).authority_public_key

    def client_enclave(self, manifest=CLIENT_MANIFEST_A, signer=CLIENT_SIGNER, isv_svn=1) -> EnclaveHandle:
        return load_enclave(manifest, signer, isv_svn, self.client_platform)

    def client(
        self,
        mode="AWARE",
        token="token-a",
        project="proj-a",
        local_enclave=None,
        expect_mrenclave=None,
        expect_mrsigner=None,
        capture=None,
    ) -> KmsClient:
        profile = ClientProfile(
            mode=mode,
            server_url=self.url,
            token=token,
            project_id=project,
            authority_key=self.authority_key,
            expected_mr_enclave=expect_mrenclave,
            expected_mr_signer=expect_mrsigner,
            local_enclave=local_enclave,
        )
        return KmsClient(profile, wire_capture=capture)

    def restart(self, platform_file: str | None = None) -> None:
        """Stop the instance and bring it back, optionally on another platform."""
        self.server.shutdown()
        if platform_file is not None:
            self.config.platform_file = platform_file
        self.config.listen_address = f"127.0.0.1:{free_port()}"
        self.server = KmsServer(self.config).start_background()

    def shutdown(self) -> None:
        self.server.shutdown()


@pytest.fixture
def server_env(tmp_path):
    env = ServerEnv(tmp_path)
    yield env
    env.shutdown()


@pytest.fixture
def server_factory(tmp_path):
    """Build servers with config overrides; all shut down at teardown."""
    envs = []

    def build(subdir: str = "srv", **overrides) -> ServerEnv:
        root = tmp_path / subdir
        root.mkdir(parents=True, exist_ok=True)
        env = ServerEnv(root, **overrides)
        envs.append(env)
        return env

    yield build
    for env in envs:
        env.shutdown()
