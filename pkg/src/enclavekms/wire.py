"""Small helpers shared by everything that touches the JSON wire format."""

from __future__ import annotations

import base64

from .errors import ProtocolError


def b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def unb64(text) -> bytes:
    if not isinstance(text, str):
        raise ProtocolError("expected base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolError(f"bad base64 field: {exc}") from exc
