/**
 * Challenger side of the attestation handshake, reimplemented against the
 * wire contract (this package has no access to the server's internals; only
 * the message formats and the quote layout).
 */

import { KeyObject } from 'node:crypto';

import {
    bindingReportData,
    deriveSessionKeys,
    handshakeMac,
    macEqual,
    newX25519PrivateKey,
    parseQuote,
    sharedSecret,
    verifyQuoteSignature,
    x25519PublicRaw,
    SessionKeys,
} from './crypto';
import { BindingError, HandshakeError, IdentityMismatchError } from './errors';
import { Msg1, Msg2, Msg3, Msg4 } from './wire';

export interface ChallengerSession {
    sessionId: Buffer;
    privateKey: KeyObject;
    gA: Buffer;
    gB: Buffer;
    keys: SessionKeys;
    serverMrEnclave?: Buffer;
    established: boolean;
}

/** Answer msg1: derive the shared keys and authenticate our public value. */
export function processMsg1(msg1: Msg1, fixedPrivateKey?: Buffer): { session: ChallengerSession; msg2: Msg2 } {
    const privateKey = newX25519PrivateKey(fixedPrivateKey);
    const gB = x25519PublicRaw(privateKey);
    const keys = deriveSessionKeys(sharedSecret(privateKey, msg1.gA));
    const session: ChallengerSession = {
        sessionId: msg1.sessionId,
        privateKey,
        gA: msg1.gA,
        gB,
        keys,
        established: false,
    };
    const msg2: Msg2 = {
        type: 'msg2',
        sessionId: msg1.sessionId,
        gB,
        mac: handshakeMac(keys.smk, Buffer.concat([gB, msg1.gA])),
    };
    return { session, msg2 };
}

/**
 * Verify msg3: the handshake MAC, the quote signature against the configured
 * authority, the binding of the quote to this exchange, and the pinned
 * server measurement. Throws before returning msg4 on any failure, so no
 * secret material can be sent to an unverified server.
 */
export function processMsg3(
    session: ChallengerSession,
    msg3: Msg3,
    authorityPublicKey: Buffer,
    expectedMrEnclave?: Buffer,
): Msg4 {
    if (!msg3.sessionId.equals(session.sessionId)) {
        throw new HandshakeError('msg3 references a different session');
    }
    if (!macEqual(handshakeMac(session.keys.smk, msg3.quote), msg3.mac)) {
        throw new HandshakeError('msg3 MAC verification failed');
    }
    const quote = parseQuote(msg3.quote);
    verifyQuoteSignature(quote, authorityPublicKey);
    const expectedReportData = bindingReportData(session.gA, session.gB, session.keys.vk);
    if (!quote.reportData.equals(expectedReportData)) {
        throw new BindingError('quote does not bind this session');
    }
    if (expectedMrEnclave !== undefined && !quote.mrEnclave.equals(expectedMrEnclave)) {
        throw new IdentityMismatchError(
            `server measurement ${quote.mrEnclave.toString('hex')} does not match the pinned value`,
        );
    }
    session.serverMrEnclave = quote.mrEnclave;
    session.established = true;
    return { type: 'msg4', sessionId: session.sessionId, status: 'OK' };
}
