export {
    SdkClient,
    SdkConfig,
    StoreAcl,
    EstablishedSession,
    loadAuthorityKey,
    sessionFileJson,
} from './client';
export { processMsg1, processMsg3, ChallengerSession } from './attest';
export {
    SdkError,
    TransportError,
    HttpError,
    AuthorityKeyError,
    WireError,
    HandshakeError,
    QuoteVerificationError,
    BindingError,
    IdentityMismatchError,
    ConfigError,
} from './errors';
export {
    b64encode,
    b64decode,
    canonicalJson,
    encodeMessage,
    decodeMessage,
    messageToDict,
    messageFromDict,
} from './wire';
export { deriveSessionKeys, gcmSeal, gcmOpen, parseQuote } from './crypto';
