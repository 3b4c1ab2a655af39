/**
 * Thin HTTP client for the key-management service: the legacy v1 interface
 * and the attestation-gated v2 store flow (server attestation only; this
 * package runs no local enclave).
 */

import { readFileSync } from 'node:fs';

import { processMsg1, processMsg3 } from './attest';
import { gcmSeal } from './crypto';
import { AuthorityKeyError, ConfigError, HttpError, TransportError } from './errors';
import { b64decode, b64encode, messageFromDict, messageToDict, Msg1, Msg3 } from './wire';

export interface SdkConfig {
    serverUrl: string;
    token: string;
    projectId: string;
    /** Hex measurement the server enclave must present (required for v2). */
    expectedServerMrEnclave?: string;
    /** Authority key file: a platform JSON, or a raw key as hex/base64. */
    authorityKeyFile?: string;
}

export interface StoreAcl {
    policy: number;
    childMrEnclaves: string[]; // hex measurements
}

/** An established session, in the same JSON shape the server-side CLI uses
 * for its --session files, so either client can continue the other's session. */
export interface EstablishedSession {
    sessionId: string; // hex
    sk: Buffer;
}

export function sessionFileJson(session: EstablishedSession): string {
    return JSON.stringify({
        session_id: session.sessionId,
        sk: b64encode(session.sk),
        mode: 'RA',
        server_identity: null,
    });
}

/** Read the quoting-authority public key from the same file formats the
 * server-side tooling emits: a platform JSON with `authority_public_key`,
 * or a bare hex/base64 key. */
export function loadAuthorityKey(path: string): Buffer {
    let text: string;
    try {
        text = readFileSync(path, 'utf-8').trim();
    } catch (err) {
        throw new AuthorityKeyError(`cannot read authority key file ${path}: ${String(err)}`);
    }
    try {
        const parsed = JSON.parse(text) as Record<string, unknown>;
        if (typeof parsed === 'object' && parsed !== null && 'authority_public_key' in parsed) {
            return b64decode(parsed['authority_public_key']);
        }
    } catch {
        // not JSON: fall through to raw encodings
    }
    if (/^[0-9a-fA-F]{64}$/.test(text)) {
        return Buffer.from(text, 'hex');
    }
    try {
        return b64decode(text);
    } catch {
        throw new AuthorityKeyError(`authority key file ${path} is neither JSON, hex, nor base64`);
    }
}

interface JsonResponse {
    status: number;
    body: Record<string, unknown>;
    setCookie?: string;
}

export class SdkClient {
    private readonly authorityKey?: Buffer;
    private cookie?: string;
    /** The most recently established attestation session. */
    lastSession?: EstablishedSession;

    constructor(private readonly config: SdkConfig) {
        if (config.authorityKeyFile) {
            this.authorityKey = loadAuthorityKey(config.authorityKeyFile);
        }
    }

    private async request(
        method: string,
        path: string,
        body?: Record<string, unknown>,
        withToken = false,
    ): Promise<JsonResponse> {
        const headers: Record<string, string> = {};
        if (withToken) headers['X-Auth-Token'] = this.config.token;
        if (body !== undefined) headers['Content-Type'] = 'application/json';
        if (this.cookie) headers['Cookie'] = this.cookie;
        let response: Response;
        try {
            response = await fetch(this.config.serverUrl.replace(/\/$/, '') + path, {
                method,
                headers,
                body: body === undefined ? undefined : JSON.stringify(body),
            });
        } catch (err) {
            throw new TransportError(`${method} ${path}: ${String(err)}`);
        }
        let parsed: Record<string, unknown>;
        try {
            parsed = (await response.json()) as Record<string, unknown>;
        } catch (err) {
            throw new TransportError(`${method} ${path}: unreadable response`);
        }
        if (response.status >= 400) {
            throw new HttpError(
                response.status,
                String(parsed['error'] ?? 'error'),
                parsed['reason'] === undefined ? undefined : String(parsed['reason']),
                String(parsed['detail'] ?? ''),
            );
        }
        const setCookie = response.headers.get('set-cookie') ?? undefined;
        if (setCookie) {
            this.cookie = setCookie.split(';')[0];
        }
        return { status: response.status, body: parsed, setCookie };
    }

    // ---- legacy v1 -------------------------------------------------------

    async v1Store(name: string, plaintext: Buffer, contentType = 'application/octet-stream'): Promise<string> {
        const { body } = await this.request(
            'POST',
            '/v1/secrets',
            { payload: b64encode(plaintext), name, content_type: contentType },
            true,
        );
        return String(body['secret_ref']);
    }

    async v1Get(ref: string): Promise<Buffer> {
        const { body } = await this.request('GET', `/v1/secrets/${ref}`, undefined, true);
        return b64decode(body['payload']);
    }

    // ---- attested v2 -----------------------------------------------------

    /**
     * Attest the server, then store the secret encrypted under the
     * negotiated session key. Aborts before any secret bytes are sent if the
     * quote fails verification or the pinned measurement does not match.
     */
    async v2AttestAndStore(
        name: string,
        plaintext: Buffer,
        acl?: StoreAcl,
        contentType = 'application/octet-stream',
    ): Promise<string> {
        if (!this.config.expectedServerMrEnclave) {
            throw new ConfigError('v2 store requires expectedServerMrEnclave to be configured');
        }
        if (!this.authorityKey) {
            throw new ConfigError('v2 store requires an authority key file');
        }
        const opened = await this.request('POST', '/v2/attest/start', {}, true);
        const msg1 = messageFromDict(opened.body['msg1']) as Msg1;
        const { session, msg2 } = processMsg1(msg1);
        const answer = await this.request('POST', '/v2/attest/msg2', { msg2: messageToDict(msg2) });
        const msg3 = messageFromDict(answer.body['msg3']) as Msg3;
        const msg4 = processMsg3(
            session,
            msg3,
            this.authorityKey,
            Buffer.from(this.config.expectedServerMrEnclave, 'hex'),
        );
        await this.request('POST', '/v2/attest/msg4', { msg4: messageToDict(msg4) });

        const sessionIdHex = session.sessionId.toString('hex');
        this.lastSession = { sessionId: sessionIdHex, sk: session.keys.sk };
        if (acl) {
            await this.request('POST', '/v2/policy', {
                session_id: sessionIdHex,
                policy: acl.policy,
                child_mrenclaves: acl.childMrEnclaves,
            });
        }
        const stored = await this.request('POST', '/v2/secrets', {
            session_id: sessionIdHex,
            sk_secret: b64encode(gcmSeal(session.keys.sk, plaintext)),
            name,
            content_type: contentType,
        });
        return String(stored.body['secret_ref']);
    }
}
