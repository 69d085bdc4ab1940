"""MUNGE-style credentials: payload type, decoder interface, and a development codec.

The development codec stands in for a MUNGE daemon. Wire format::

    base64url_nopad( HMAC-SHA256(key, payload) || payload )

where ``payload`` is UTF-8 JSON with keys in this exact order and no
whitespace: ``username, uid, gid, origin, encode_time, ttl``. Decoding
rejects non-canonical base64 so that every byte of the string is covered
by the MAC.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import ipaddress
import json
from dataclasses import asdict, dataclass
from typing import Protocol

MAC_SIZE = hashlib.sha256().digest_size
FIELD_ORDER = ("username", "uid", "gid", "origin", "encode_time", "ttl")


class CredentialError(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class MungeCredential:
    username: str
    uid: int
    gid: int
    origin: str
    encode_time: int
    ttl: int

    @property
    def origin_address(self):
        return ipaddress.ip_address(self.origin)


class CredentialDecoder(Protocol):
    def decode(self, credential: str) -> MungeCredential:
        """Return the payload or raise CredentialError."""


def _b64encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def _b64decode(text: str) -> bytes:
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as e:
        raise CredentialError("malformed", str(e)) from None
    if _b64encode(raw) != text:
        raise CredentialError("malformed", "non-canonical encoding")
    return raw


def canonical_payload(cred: MungeCredential) -> bytes:
    d = asdict(cred)
    return json.dumps({k: d[k] for k in FIELD_ORDER}, separators=(",", ":"), ensure_ascii=False).encode()


def encode_dev_credential(cred: MungeCredential, key: bytes) -> str:
    if not key:
        raise ValueError("key must be non-empty")
    payload = canonical_payload(cred)
    mac = hmac.new(key, payload, hashlib.sha256).digest()
    return _b64encode(mac + payload)


def decode_dev_credential(text: str, key: bytes) -> MungeCredential:
    if not key:
        raise ValueError("key must be non-empty")
    if not isinstance(text, str) or not text.isascii():
        raise CredentialError("malformed", "not ascii")
    raw = _b64decode(text)
    if len(raw) <= MAC_SIZE:
        raise CredentialError("malformed", "too short")
    mac, payload = raw[:MAC_SIZE], raw[MAC_SIZE:]
    expected = hmac.new(key, payload, hashlib.sha256).digest()
    if not hmac.compare_digest(mac, expected):
        raise CredentialError("mac-mismatch")
    try:
        data = json.loads(payload)
        if list(data) != list(FIELD_ORDER):
            raise ValueError("field order")
        cred = MungeCredential(**data)
        if not isinstance(cred.username, str) or not cred.username:
            raise ValueError("username")
        for name in ("uid", "gid", "encode_time", "ttl"):
            if type(getattr(cred, name)) is not int:
                raise ValueError(name)
        cred.origin_address
    except (ValueError, TypeError) as e:
        raise CredentialError("malformed", f"bad payload: {e}") from None
    return cred


class DevHmacDecoder:
    """Shared-key decoder; everyone holding ``key`` is one credential domain."""

    def __init__(self, key: bytes) -> None:
        if not key:
            raise ValueError("key must be non-empty")
        self._key = key

    def encode(self, cred: MungeCredential) -> str:
        return encode_dev_credential(cred, self._key)

    def decode(self, credential: str) -> MungeCredential:
        return decode_dev_credential(credential, self._key)
