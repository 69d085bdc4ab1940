"""Request authentication: bearer tokens and MUNGE-style credentials."""

from __future__ import annotations

import base64
import ipaddress
import logging
import re
import secrets
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import jwt

from .clock import Clock
from .munge import CredentialDecoder, CredentialError, MungeCredential
from .registry import Registry, TokenRecord
from .scopes import DEFAULT_MUNGE_SCOPES

logger = logging.getLogger(__name__)

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

MUNGE_MAX_TTL = 5  # credentials must carry ttl strictly below this
RANDOM_CLAIM_BYTES = 32
WWW_AUTHENTICATE = 'Bearer realm="schedgate", MUNGE'


class AuthError(Exception):
    """A credential was presented and rejected. ``reason`` is for logs only."""

    def __init__(self, reason: str, method: str = "") -> None:
        super().__init__(reason)
        self.reason = reason
        self.method = method


@dataclass(frozen=True)
class Identity:
    username: str
    scopes: frozenset[str]
    auth_method: str
    source_address: Optional[IPAddress] = None
    account_patterns: tuple[re.Pattern, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not self.username:
            raise ValueError("identity username must be non-empty")

    @property
    def restricted(self) -> bool:
        return bool(self.account_patterns)


def parse_address(value) -> Optional[IPAddress]:
    if value is None:
        return None
    if isinstance(value, (ipaddress.IPv4Address, ipaddress.IPv6Address)):
        addr = value
    else:
        try:
            addr = ipaddress.ip_address(str(value))
        except ValueError:
            return None
    if isinstance(addr, ipaddress.IPv6Address) and addr.ipv4_mapped is not None:
        return addr.ipv4_mapped
    return addr


def identity_from_record(record: TokenRecord, source_address=None) -> Identity:
    return Identity(
        username=record.username,
        scopes=record.scopes,
        auth_method="bearer",
        source_address=parse_address(source_address),
        account_patterns=record.compiled_patterns,
    )


def verify_bearer(value: str, registry: Registry) -> TokenRecord:
    """Opaque exact match against the registry; signatures and expiry are not inspected."""
    if not value:
        raise AuthError("empty-bearer", "bearer")
    record = registry.lookup(value)
    if record is None:
        raise AuthError("unknown-bearer", "bearer")
    return record


def _b64url(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def mint_bearer_token(
    username: str,
    now: float,
    validity_seconds: int,
    entropy_source: Callable[[int], bytes] = secrets.token_bytes,
) -> str:
    """Mint a JWT-shaped bearer value signed with a throwaway random key.

    The gateway never verifies the signature; the JWT shape only keeps
    clients that introspect tokens happy.
    """
    if validity_seconds <= 0:
        raise ValueError("validity_seconds must be positive")
    if not username:
        raise ValueError("username must be non-empty")
    key = entropy_source(32)
    rnd = entropy_source(RANDOM_CLAIM_BYTES)
    if len(key) < 32 or len(rnd) < RANDOM_CLAIM_BYTES:
        raise RuntimeError("entropy source returned too few bytes")
    iat = int(now)
    claims = {"sun": username, "iat": iat, "exp": iat + int(validity_seconds), "rnd": _b64url(rnd)}
    return jwt.encode(claims, key, algorithm="HS256")


def verify_munge(
    credential: str,
    source_address,
    decoder: Optional[CredentialDecoder],
    clock: Clock,
) -> MungeCredential:
    if decoder is None:
        raise AuthError("munge-disabled", "munge")
    try:
        cred = decoder.decode(credential)
    except CredentialError as e:
        raise AuthError(f"decode-failed:{e.reason}", "munge") from None
    if parse_address(cred.origin) != parse_address(source_address):
        raise AuthError("address-mismatch", "munge")
    if not cred.ttl < MUNGE_MAX_TTL:
        raise AuthError("ttl-too-long", "munge")
    if cred.encode_time + cred.ttl < clock.now():
        raise AuthError("expired", "munge")
    return cred


def _header(headers, name: str) -> list[str]:
    getlist = getattr(headers, "getlist", None)
    if getlist is not None:
        return list(getlist(name))
    pairs = headers.items() if isinstance(headers, Mapping) else headers
    lname = name.lower()
    return [v for k, v in pairs if k.lower() == lname]


def authenticate(
    headers,
    source_address,
    registry: Registry,
    decoder: Optional[CredentialDecoder],
    clock: Clock,
    munge_scopes: frozenset[str] = DEFAULT_MUNGE_SCOPES,
) -> Optional[Identity]:
    """Identity for the request, None if no credentials, AuthError if rejected.

    Providers by header shape, first present wins, no fallthrough:
    ``Authorization: Bearer``, then ``X-Slurm-User-Token``, then
    ``Authorization: MUNGE``.
    """
    authz = _header(headers, "authorization")
    user_token = _header(headers, "x-slurm-user-token")
    if len(authz) > 1 or len(user_token) > 1:
        raise AuthError("duplicate-credential-header")

    scheme, value = "", ""
    if authz:
        scheme, _, value = authz[0].strip().partition(" ")
        scheme = scheme.lower()
        value = value.strip()
        if scheme not in ("bearer", "munge"):
            raise AuthError("unsupported-scheme")

    if scheme == "bearer":
        record = verify_bearer(value, registry)
        return identity_from_record(record, source_address)
    if user_token:
        record = verify_bearer(user_token[0].strip(), registry)
        return identity_from_record(record, source_address)
    if scheme == "munge":
        cred = verify_munge(value, source_address, decoder, clock)
        return Identity(
            username=cred.username,
            scopes=frozenset(munge_scopes),
            auth_method="munge",
            source_address=parse_address(source_address),
        )
    return None
