/** Error types surfaced by the SDK. */

export class SdkError extends Error {
    constructor(message: string) {
        super(message);
        this.name = new.target.name;
    }
}

/** Server unreachable or response unreadable. */
export class TransportError extends SdkError {}

/** Non-2xx HTTP response, carrying the server's error code. */
export class HttpError extends SdkError {
    constructor(
        public readonly status: number,
        public readonly code: string,
        public readonly reason: string | undefined,
        detail: string,
    ) {
        super(`HTTP ${status} ${code}${reason ? ` (${reason})` : ''}: ${detail}`);
    }
}

/** The configured authority key file is missing or unparseable. */
export class AuthorityKeyError extends SdkError {}

/** A handshake message failed structural validation. */
export class WireError extends SdkError {}

/** Message authentication failed during the handshake. */
export class HandshakeError extends SdkError {}

/** The server quote's signature did not verify. */
export class QuoteVerificationError extends SdkError {}

/** The quote does not bind this session's key-exchange values. */
export class BindingError extends SdkError {}

/** The attested server measurement does not match the pinned one. */
export class IdentityMismatchError extends SdkError {}

/** SDK configuration is incomplete for the requested operation. */
export class ConfigError extends SdkError {}
