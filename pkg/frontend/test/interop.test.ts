/**
 * Live interop against the server implementation: spawns a disposable
 * instance (scripts/start_server.py), drives the SDK against it, and
 * retrieves SDK-stored secrets with the server package's own CLI client to
 * prove byte-identical plaintext across implementations.
 *
 * Skips cleanly when the server package is not importable in python3.
 */

import assert from 'node:assert/strict';
import { execFileSync, spawn, spawnSync, ChildProcess } from 'node:child_process';
import { readdirSync } from 'node:fs';
import { join } from 'node:path';
import { mkdtempSync, writeFileSync, readFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { after, before, test } from 'node:test';

import { SdkClient, sessionFileJson } from '../src/client';
import { HttpError, IdentityMismatchError } from '../src/errors';

interface ServerBundle {
    url: string;
    tokens: Record<string, string>;
    admin_token: string;
    authority_public_key: string;
    platform_file: string;
    store_root: string;
    server_mr_enclave: string;
    client_platform_file: string;
    client_manifest: string;
    client_signer: string;
    client_mr_enclave: string;
}

const PYTHON = process.env.PYTHON ?? 'python3';
const SCRIPTS = join(__dirname, '..', '..', 'scripts');

function serverPackageAvailable(): boolean {
    const probe = spawnSync(PYTHON, ['-c', 'import enclavekms'], { timeout: 30_000 });
    return probe.status === 0;
}

let server: ChildProcess | undefined;
let bundle: ServerBundle;
let authorityKeyFile: string;
const available = serverPackageAvailable();

before(async () => {
    if (!available) return;
    server = spawn(PYTHON, [join(SCRIPTS, 'start_server.py')], { stdio: ['ignore', 'pipe', 'inherit'] });
    bundle = await new Promise<ServerBundle>((resolve, reject) => {
        const timer = setTimeout(() => reject(new Error('server did not start')), 30_000);
        let buffered = '';
        server!.stdout!.on('data', (chunk: Buffer) => {
            buffered += chunk.toString();
            const newline = buffered.indexOf('\n');
            if (newline >= 0) {
                clearTimeout(timer);
                resolve(JSON.parse(buffered.slice(0, newline)) as ServerBundle);
            }
        });
        server!.on('exit', (code) => reject(new Error(`server exited early (${code})`)));
    });
    // the SDK reads the same authority key file format as the primary client
    authorityKeyFile = bundle.platform_file;
});

after(() => {
    server?.kill('SIGTERM');
});

function sdk(overrides: Partial<ConstructorParameters<typeof SdkClient>[0]> = {}): SdkClient {
    return new SdkClient({
        serverUrl: bundle.url,
        token: 'token-a',
        projectId: 'proj-a',
        expectedServerMrEnclave: bundle.server_mr_enclave,
        authorityKeyFile,
        ...overrides,
    });
}

/** Retrieve a secret with the server package's own CLI client, continuing
 * the SDK's session via the shared session-file format. */
function primaryClientGetWithSession(ref: string, sessionJson: string): Buffer {
    const sessionFile = join(mkdtempSync(join(tmpdir(), 'sdk-interop-')), 'session.json');
    writeFileSync(sessionFile, sessionJson);
    const output = execFileSync(PYTHON, [
        '-m', 'enclavekms.cli', 'get',
        '--server', bundle.url,
        '--token', 'token-a',
        '--project', 'proj-a',
        '--authority-key', authorityKeyFile,
        '--session', sessionFile,
        '--ref', ref,
    ]);
    const parsed = JSON.parse(output.toString()) as { payload: string };
    return Buffer.from(parsed.payload, 'base64');
}

/** Retrieve with the primary's enclave-running client: mutual attestation,
 * then a policy-gated fetch (the cross-implementation distribution path). */
function primaryEnclaveClientGet(ref: string): Buffer {
    const sessionFile = join(mkdtempSync(join(tmpdir(), 'sdk-interop-ma-')), 'session.json');
    execFileSync(PYTHON, [
        '-m', 'enclavekms.cli', 'attest',
        '--mode', 'enabled',
        '--server', bundle.url,
        '--token', 'token-a',
        '--project', 'proj-a',
        '--authority-key', authorityKeyFile,
        '--manifest', bundle.client_manifest,
        '--signer', bundle.client_signer,
        '--client-platform', bundle.client_platform_file,
        '--session-out', sessionFile,
    ]);
    const output = execFileSync(PYTHON, [
        '-m', 'enclavekms.cli', 'get',
        '--server', bundle.url,
        '--token', 'token-a',
        '--project', 'proj-a',
        '--authority-key', authorityKeyFile,
        '--session', sessionFile,
        '--ref', ref,
    ]);
    const parsed = JSON.parse(output.toString()) as { payload: string };
    return Buffer.from(parsed.payload, 'base64');
}

test('v1 roundtrip against the live server', { skip: !available }, async () => {
    const client = sdk();
    const payload = Buffer.from('plain v1 payload');
    const ref = await client.v1Store('sdk-v1', payload);
    assert.deepEqual(await client.v1Get(ref), payload);
});

test('v1 unicode payload is byte-exact', { skip: !available }, async () => {
    const client = sdk();
    const payload = Buffer.from('påsswörd ✓ \u{1f511}', 'utf-8');
    const ref = await client.v1Store('unicode', payload);
    assert.deepEqual(await client.v1Get(ref), payload);
});

test('v1 bad token surfaces a 401', { skip: !available }, async () => {
    const client = sdk({ token: 'wrong' });
    await assert.rejects(client.v1Store('x', Buffer.from('x')), (err: Error) => {
        assert.ok(err instanceof HttpError);
        assert.equal((err as HttpError).status, 401);
        return true;
    });
});

test('v1 secret stored by the SDK is readable by the primary client over v1', { skip: !available }, async () => {
    const client = sdk();
    const payload = Buffer.from('cross-implementation v1');
    const ref = await client.v1Store('cross-v1', payload);
    const output = execFileSync(PYTHON, [
        '-m', 'enclavekms.cli', 'get',
        '--mode', 'legacy',
        '--server', bundle.url,
        '--token', 'token-a',
        '--ref', ref,
    ]);
    const parsed = JSON.parse(output.toString()) as { payload: string };
    assert.deepEqual(Buffer.from(parsed.payload, 'base64'), payload);
});

test('v2 attested store, retrieved by the primary client (same session)', { skip: !available }, async () => {
    const client = sdk();
    const payload = Buffer.from('attested cross-implementation secret ✓', 'utf-8');
    const ref = await client.v2AttestAndStore('sdk-v2', payload);
    assert.ok(client.lastSession, 'SDK retained its established session');
    assert.deepEqual(
        primaryClientGetWithSession(ref, sessionFileJson(client.lastSession!)),
        payload,
    );
});

test('v2 store with a policy-3 ACL listing the primary enclave client', { skip: !available }, async () => {
    const client = sdk();
    const payload = Buffer.from('distributed to a listed enclave');
    const ref = await client.v2AttestAndStore('sdk-acl', payload, {
        policy: 3,
        childMrEnclaves: [bundle.client_mr_enclave],
    });
    assert.deepEqual(primaryEnclaveClientGet(ref), payload);
});

test('wrong pinned measurement aborts before any secret is sent', { skip: !available }, async () => {
    const secretsDir = join(bundle.store_root, 'secrets');
    const countBefore = readdirSync(secretsDir).length;
    const client = sdk({ expectedServerMrEnclave: '00'.repeat(32) });
    await assert.rejects(
        client.v2AttestAndStore('never', Buffer.from('must not leave')),
        IdentityMismatchError,
    );
    assert.equal(readdirSync(secretsDir).length, countBefore);
});

test('authority key can also be read from a raw key file', { skip: !available }, async () => {
    const rawFile = join(mkdtempSync(join(tmpdir(), 'sdk-key-')), 'authority.key');
    const platform = JSON.parse(readFileSync(bundle.platform_file, 'utf-8')) as Record<string, string>;
    writeFileSync(rawFile, platform['authority_public_key']);
    const client = sdk({ authorityKeyFile: rawFile });
    const ref = await client.v2AttestAndStore('rawkey', Buffer.from('works'));
    assert.ok(ref.length === 32);
});
