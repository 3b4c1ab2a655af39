/**
 * Wire format: canonical JSON with a `type` discriminator, hex session ids,
 * and base64 binary fields. Canonical form sorts keys and uses no whitespace,
 * matching the server's encoding byte for byte.
 */

import { WireError } from './errors';

export function b64encode(data: Buffer): string {
    return data.toString('base64');
}

export function b64decode(text: unknown): Buffer {
    if (typeof text !== 'string' || !/^[A-Za-z0-9+/]*={0,2}$/.test(text)) {
        throw new WireError('bad base64 field');
    }
    const decoded = Buffer.from(text, 'base64');
    if (b64encode(decoded) !== text) {
        throw new WireError('bad base64 field');
    }
    return decoded;
}

/** JSON with recursively sorted keys and no whitespace. */
export function canonicalJson(value: unknown): string {
    if (value === null || typeof value !== 'object' || Array.isArray(value)) {
        return JSON.stringify(value);
    }
    const record = value as Record<string, unknown>;
    const parts = Object.keys(record)
        .sort()
        .map((key) => `${JSON.stringify(key)}:${canonicalJson(record[key])}`);
    return `{${parts.join(',')}}`;
}

export interface Msg1 {
    type: 'msg1';
    sessionId: Buffer;
    gA: Buffer;
}

export interface Msg2 {
    type: 'msg2';
    sessionId: Buffer;
    gB: Buffer;
    mac: Buffer;
}

export interface Msg3 {
    type: 'msg3';
    sessionId: Buffer;
    quote: Buffer;
    mac: Buffer;
}

export interface Msg4 {
    type: 'msg4';
    sessionId: Buffer;
    status: 'OK' | 'REJECTED';
}

export type HandshakeMessage = Msg1 | Msg2 | Msg3 | Msg4;

const SESSION_ID_LEN = 16;
const QUOTE_LEN = 226;

function sessionIdFrom(data: Record<string, unknown>): Buffer {
    const raw = data['session_id'];
    if (typeof raw !== 'string' || !/^[0-9a-f]+$/.test(raw)) {
        throw new WireError('missing or malformed session_id');
    }
    const sessionId = Buffer.from(raw, 'hex');
    if (sessionId.length !== SESSION_ID_LEN) {
        throw new WireError('session_id must be 16 bytes');
    }
    return sessionId;
}

export function messageFromDict(data: unknown): HandshakeMessage {
    if (data === null || typeof data !== 'object' || Array.isArray(data)) {
        throw new WireError('message must be a JSON object');
    }
    const record = data as Record<string, unknown>;
    switch (record['type']) {
        case 'msg1': {
            const gA = b64decode(record['g_a']);
            if (gA.length !== 32) throw new WireError('g_a must be 32 bytes');
            return { type: 'msg1', sessionId: sessionIdFrom(record), gA };
        }
        case 'msg2': {
            const gB = b64decode(record['g_b']);
            if (gB.length !== 32) throw new WireError('g_b must be 32 bytes');
            return { type: 'msg2', sessionId: sessionIdFrom(record), gB, mac: b64decode(record['mac']) };
        }
        case 'msg3': {
            const quote = b64decode(record['quote']);
            if (quote.length !== QUOTE_LEN) throw new WireError(`quote must be ${QUOTE_LEN} bytes`);
            return { type: 'msg3', sessionId: sessionIdFrom(record), quote, mac: b64decode(record['mac']) };
        }
        case 'msg4': {
            const status = record['status'];
            if (status !== 'OK' && status !== 'REJECTED') {
                throw new WireError('msg4 status must be OK or REJECTED');
            }
            return { type: 'msg4', sessionId: sessionIdFrom(record), status };
        }
        default:
            throw new WireError(`unknown message type: ${String(record['type'])}`);
    }
}

export function messageToDict(msg: HandshakeMessage): Record<string, unknown> {
    switch (msg.type) {
        case 'msg1':
            return { type: 'msg1', session_id: msg.sessionId.toString('hex'), g_a: b64encode(msg.gA) };
        case 'msg2':
            return {
                type: 'msg2',
                session_id: msg.sessionId.toString('hex'),
                g_b: b64encode(msg.gB),
                mac: b64encode(msg.mac),
            };
        case 'msg3':
            return {
                type: 'msg3',
                session_id: msg.sessionId.toString('hex'),
                quote: b64encode(msg.quote),
                mac: b64encode(msg.mac),
            };
        case 'msg4':
            return { type: 'msg4', session_id: msg.sessionId.toString('hex'), status: msg.status };
    }
}

export function encodeMessage(msg: HandshakeMessage): string {
    return canonicalJson(messageToDict(msg));
}

export function decodeMessage(text: string): HandshakeMessage {
    let data: unknown;
    try {
        data = JSON.parse(text);
    } catch (err) {
        throw new WireError(`not valid JSON: ${String(err)}`);
    }
    return messageFromDict(data);
}
