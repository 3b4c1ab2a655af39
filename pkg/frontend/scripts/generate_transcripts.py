#!/usr/bin/env python3
"""Regenerate the golden handshake transcripts from the server implementation.

Runs 20 seeded challenger handshakes against a fixed platform and records
every wire message in canonical form plus the challenger's DH private key and
derived keys, so the SDK can replay each handshake deterministically and
compare its own bytes. Output: ../fixtures/transcripts.json
"""

import base64
import json
import random
import sys
from pathlib import Path

from enclavekms import attestation as att
from enclavekms.enclave import PlatformState, load_enclave

MANIFEST = b"transcript-server-enclave"
SIGNER = b"transcript-signer-key"
PLATFORM_SEED = 42
TRANSCRIPT_COUNT = 20


def main() -> int:
    platform = PlatformState.generate(random.Random(PLATFORM_SEED))
    enclave = load_enclave(MANIFEST, SIGNER, 1, platform)

    transcripts = []
    for seed in range(TRANSCRIPT_COUNT):
        server_rng = random.Random(1000 + seed)
        client_rng = random.Random(2000 + seed)
        responder, msg1 = att.responder_start(enclave, rng=server_rng)
        challenger, msg2 = att.challenger_process_msg1(msg1, rng=client_rng)
        msg3 = att.responder_process_msg2(responder, msg2, enclave, platform)
        msg4 = att.challenger_process_msg3(challenger, msg3, platform.authority_public_key)
        att.responder_process_msg4(responder, msg4)
        assert responder.keys == challenger.keys
        transcripts.append(
            {
                "seed": seed,
                "challenger_private_key": base64.b64encode(
                    challenger.dh_private.private_bytes_raw()
                ).decode(),
                "msg1": att.encode_message(msg1),
                "msg2": att.encode_message(msg2),
                "msg3": att.encode_message(msg3),
                "msg4": att.encode_message(msg4),
                "keys": {
                    "smk": challenger.keys.smk.hex(),
                    "sk": challenger.keys.sk.hex(),
                    "mk": challenger.keys.mk.hex(),
                    "vk": challenger.keys.vk.hex(),
                },
            }
        )

    bundle = {
        "authority_public_key": base64.b64encode(platform.authority_public_key).decode(),
        "server_mr_enclave": enclave.identity.mr_enclave.hex(),
        "server_mr_signer": enclave.identity.mr_signer.hex(),
        "transcripts": transcripts,
    }
    out_path = Path(__file__).resolve().parent.parent / "fixtures" / "transcripts.json"
    out_path.write_text(json.dumps(bundle, indent=1))
    print(f"wrote {len(transcripts)} transcripts to {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
