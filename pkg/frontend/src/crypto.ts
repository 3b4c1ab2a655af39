/**
 * Crypto primitives for the key-exchange handshake, built on node:crypto:
 * X25519 key agreement, HKDF-SHA256 key derivation, HMAC message tags,
 * AES-128-GCM payload protection, Ed25519 quote verification, and the
 * fixed-offset quote layout.
 */

import {
    createCipheriv,
    createDecipheriv,
    createHash,
    createHmac,
    createPrivateKey,
    createPublicKey,
    diffieHellman,
    hkdfSync,
    randomBytes,
    timingSafeEqual,
    verify as edVerify,
    KeyObject,
} from 'node:crypto';

import { HandshakeError, QuoteVerificationError, WireError } from './errors';

const PKCS8_X25519_PREFIX = Buffer.from('302e020100300506032b656e04220420', 'hex');
const SPKI_X25519_PREFIX = Buffer.from('302a300506032b656e032100', 'hex');
const SPKI_ED25519_PREFIX = Buffer.from('302a300506032b6570032100', 'hex');

export const KEY_LEN = 16;
export const REPORT_DATA_LEN = 64;
const REPORT_BODY_LEN = 32 + 32 + 2 + 16 + REPORT_DATA_LEN;
const REPORT_LEN = REPORT_BODY_LEN + 16;
export const QUOTE_LEN = REPORT_LEN + 64;

export function x25519PrivateKeyFromRaw(raw: Buffer): KeyObject {
    if (raw.length !== 32) throw new WireError('X25519 private key must be 32 bytes');
    return createPrivateKey({
        key: Buffer.concat([PKCS8_X25519_PREFIX, raw]),
        format: 'der',
        type: 'pkcs8',
    });
}

export function x25519PublicKeyFromRaw(raw: Buffer): KeyObject {
    if (raw.length !== 32) throw new WireError('X25519 public key must be 32 bytes');
    return createPublicKey({
        key: Buffer.concat([SPKI_X25519_PREFIX, raw]),
        format: 'der',
        type: 'spki',
    });
}

export function x25519PublicRaw(privateKey: KeyObject): Buffer {
    const spki = createPublicKey(privateKey).export({ format: 'der', type: 'spki' });
    return Buffer.from(spki.subarray(spki.length - 32));
}

export function newX25519PrivateKey(fixedRaw?: Buffer): KeyObject {
    return x25519PrivateKeyFromRaw(fixedRaw ?? randomBytes(32));
}

export function sharedSecret(privateKey: KeyObject, peerPublicRaw: Buffer): Buffer {
    return Buffer.from(
        diffieHellman({ privateKey, publicKey: x25519PublicKeyFromRaw(peerPublicRaw) }),
    );
}

export interface SessionKeys {
    smk: Buffer; // handshake message integrity
    sk: Buffer; // session key protecting secrets in flight
    mk: Buffer; // masking key (mutual-attestation payloads; unused here)
    vk: Buffer; // bound into the quote's report data
}

export function deriveSessionKeys(secret: Buffer): SessionKeys {
    const one = (label: string): Buffer =>
        Buffer.from(hkdfSync('sha256', secret, Buffer.alloc(0), Buffer.from(label), KEY_LEN));
    return { smk: one('SMK'), sk: one('SK'), mk: one('MK'), vk: one('VK') };
}

export function handshakeMac(smk: Buffer, data: Buffer): Buffer {
    return createHmac('sha256', smk).update(data).digest().subarray(0, 16);
}

export function macEqual(a: Buffer, b: Buffer): boolean {
    return a.length === b.length && timingSafeEqual(a, b);
}

export function sha256(data: Buffer): Buffer {
    return createHash('sha256').update(data).digest();
}

/** AES-128-GCM, framed as iv(12) ‖ ciphertext ‖ tag(16). */
export function gcmSeal(key: Buffer, plaintext: Buffer): Buffer {
    const iv = randomBytes(12);
    const cipher = createCipheriv('aes-128-gcm', key, iv);
    const ciphertext = Buffer.concat([cipher.update(plaintext), cipher.final()]);
    return Buffer.concat([iv, ciphertext, cipher.getAuthTag()]);
}

export function gcmOpen(key: Buffer, payload: Buffer): Buffer {
    if (payload.length < 12 + 16) throw new HandshakeError('payload too short');
    const decipher = createDecipheriv('aes-128-gcm', key, payload.subarray(0, 12));
    decipher.setAuthTag(payload.subarray(payload.length - 16));
    return Buffer.concat([
        decipher.update(payload.subarray(12, payload.length - 16)),
        decipher.final(),
    ]);
}

export interface QuoteContents {
    mrEnclave: Buffer;
    mrSigner: Buffer;
    isvSvn: number;
    cpuSvn: Buffer;
    reportData: Buffer;
    reportBytes: Buffer; // the signed portion
    signature: Buffer;
}

export function parseQuote(quote: Buffer): QuoteContents {
    if (quote.length !== QUOTE_LEN) {
        throw new WireError(`quote must be ${QUOTE_LEN} bytes, got ${quote.length}`);
    }
    return {
        mrEnclave: Buffer.from(quote.subarray(0, 32)),
        mrSigner: Buffer.from(quote.subarray(32, 64)),
        isvSvn: quote.readUInt16BE(64),
        cpuSvn: Buffer.from(quote.subarray(66, 82)),
        reportData: Buffer.from(quote.subarray(82, 146)),
        reportBytes: Buffer.from(quote.subarray(0, REPORT_LEN)),
        signature: Buffer.from(quote.subarray(REPORT_LEN)),
    };
}

export function verifyQuoteSignature(quote: QuoteContents, authorityPublicKeyRaw: Buffer): void {
    if (authorityPublicKeyRaw.length !== 32) {
        throw new QuoteVerificationError('authority key must be a raw 32-byte Ed25519 key');
    }
    const key = createPublicKey({
        key: Buffer.concat([SPKI_ED25519_PREFIX, authorityPublicKeyRaw]),
        format: 'der',
        type: 'spki',
    });
    if (!edVerify(null, quote.reportBytes, key, quote.signature)) {
        throw new QuoteVerificationError('quote signature verification failed');
    }
}

/** report_data binding: SHA-256(g_a ‖ g_b ‖ vk), zero-padded to 64 bytes. */
export function bindingReportData(gA: Buffer, gB: Buffer, vk: Buffer): Buffer {
    const padded = Buffer.alloc(REPORT_DATA_LEN);
    sha256(Buffer.concat([gA, gB, vk])).copy(padded);
    return padded;
}
