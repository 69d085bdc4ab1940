"""Endpoint routing: path patterns, route rules, and the shipped default table."""

from __future__ import annotations

import ipaddress
import re
from functools import cached_property
from typing import Iterable, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .scopes import unknown_scopes

IPNetwork = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]

HTTP_METHODS = frozenset({"GET", "HEAD", "POST", "PUT", "PATCH", "DELETE", "OPTIONS"})
READ_METHODS = frozenset({"GET", "HEAD", "OPTIONS"})

# Extractor ids understood by authz.extract_accounts.
ACCOUNT_EXTRACTORS = frozenset(
    {
        "job-submit",
        "job-update",
        "account-manage",
        "account-path",
        "accounts-association",
        "association-manage",
        "association-query",
        "user-manage",
        "users-association",
    }
)

BUILTIN_HANDLERS = frozenset({"upstream", "health", "health-deep", "unavailable"})

_VERSION_RE = re.compile(r"v\d+\.\d+\.\d+")
_HANDLER_RE = re.compile(r"[a-z][a-z0-9_-]*")


def is_mutating_method(method: str) -> bool:
    """Wildcard and any non-read method count as mutating."""
    return method == "*" or method.upper() not in READ_METHODS


def split_path(path: str) -> list[str]:
    path = path.split("?", 1)[0]
    return [seg for seg in path.split("/") if seg]


def request_segments(path: str) -> Optional[list[str]]:
    """Segments of a request path, or None if it is not in normal form.

    Empty, ``.`` and ``..`` segments and encoded slashes are refused rather
    than normalized so the path that was authorized is exactly the path the
    upstream sees.
    """
    path = path.split("?", 1)[0]
    if not path.startswith("/"):
        return None
    parts = path.split("/")[1:]
    if any(p in ("", ".", "..") or "%2f" in p.lower() or "%5c" in p.lower() for p in parts):
        return None
    return parts


class PathPattern:
    """Segment pattern.

    ``*`` matches exactly one segment, ``{version}`` matches one ``vX.Y.Z``
    segment, and a final ``**`` matches any remaining segments (including none).
    Everything else is literal.
    """

    def __init__(self, pattern: str) -> None:
        if not pattern.startswith("/"):
            raise ValueError(f"path pattern must start with '/': {pattern!r}")
        self.pattern = pattern
        self.segments = split_path(pattern)
        for i, seg in enumerate(self.segments):
            if seg == "**" and i != len(self.segments) - 1:
                raise ValueError(f"'**' is only allowed as the last segment: {pattern!r}")

    def matches(self, path: str) -> bool:
        parts = request_segments(path)
        if parts is None:
            return False
        segs = self.segments
        if segs and segs[-1] == "**":
            fixed = segs[:-1]
            if len(parts) < len(fixed):
                return False
        else:
            fixed = segs
            if len(parts) != len(fixed):
                return False
        for seg, part in zip(fixed, parts):
            if seg == "*":
                continue
            if seg == "{version}":
                if not _VERSION_RE.fullmatch(part):
                    return False
            elif seg != part:
                return False
        return True

    def __repr__(self) -> str:
        return f"PathPattern({self.pattern!r})"


class RouteRule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: str
    path: str
    scopes: frozenset[str] = frozenset()
    cache_policy: Optional[str] = None
    account_extractor: Optional[str] = None
    groups: Optional[frozenset[str]] = None
    cidrs: Optional[tuple[IPNetwork, ...]] = None
    handler: str = "upstream"

    @field_validator("method")
    @classmethod
    def _method(cls, v: str) -> str:
        v = v.upper()
        if v != "*" and v not in HTTP_METHODS:
            raise ValueError(f"unknown HTTP method {v!r}")
        return v

    @field_validator("path")
    @classmethod
    def _path(cls, v: str) -> str:
        PathPattern(v)
        return v

    @field_validator("scopes")
    @classmethod
    def _scopes(cls, v: frozenset[str]) -> frozenset[str]:
        bad = unknown_scopes(v)
        if bad:
            raise ValueError(f"unknown scope(s): {', '.join(bad)}")
        return v

    @field_validator("cidrs", mode="before")
    @classmethod
    def _cidrs(cls, v):
        if v is None:
            return None
        return tuple(ipaddress.ip_network(c, strict=False) for c in v)

    @model_validator(mode="after")
    def _consistency(self) -> "RouteRule":
        if self.account_extractor is not None:
            if self.account_extractor not in ACCOUNT_EXTRACTORS:
                raise ValueError(f"unknown account extractor {self.account_extractor!r}")
            if not self.mutating:
                raise ValueError("account_extractor is only allowed on mutating routes")
        if self.cache_policy is not None and self.method != "GET":
            raise ValueError("cache_policy is only allowed on GET routes")
        if not _HANDLER_RE.fullmatch(self.handler):
            raise ValueError(f"invalid handler name {self.handler!r}")
        return self

    @property
    def mutating(self) -> bool:
        return is_mutating_method(self.method)

    @property
    def public(self) -> bool:
        return not self.scopes

    @cached_property
    def pattern(self) -> PathPattern:
        return PathPattern(self.path)

    def matches(self, method: str, path: str) -> bool:
        if self.method != "*" and self.method != method.upper():
            return False
        return self.pattern.matches(path)


def match_route(routes: Sequence[RouteRule], method: str, path: str) -> Optional[RouteRule]:
    """First rule in declared order matching ``method`` and ``path``, else None."""
    for rule in routes:
        if rule.matches(method, path):
            return rule
    return None


def duplicate_routes(routes: Iterable[RouteRule]) -> list[tuple[str, str]]:
    seen: set[tuple[str, str]] = set()
    dups = []
    for r in routes:
        k = (r.method, r.path)
        if k in seen:
            dups.append(k)
        seen.add(k)
    return dups


def _r(method, path, scopes=(), policy=None, extractor=None, **extra) -> dict:
    d = {"method": method, "path": path, "scopes": frozenset(scopes)}
    if policy:
        d["cache_policy"] = policy
    if extractor:
        d["account_extractor"] = extractor
    d.update(extra)
    return d


ADMIN_GROUPS = ["hpc-admins"]
ADMIN_NETWORKS = ["127.0.0.0/8", "::1/128", "10.0.0.0/8"]

BUILTIN_ROUTES = [
    _r("GET", "/health", handler="health"),
    _r("GET", "/health/deep", ["health:check"], handler="health-deep"),
]

# Order matters: specific paths precede their wildcard siblings.
DEFAULT_ROUTES = BUILTIN_ROUTES + [
    # controller
    _r("GET", "/slurm/*/ping", ["slurm:read"], "short"),
    _r("GET", "/slurm/*/diag", ["slurm:read"], "short"),
    _r("GET", "/slurm/*/jobs", ["slurm:read"], "short"),
    _r("GET", "/slurm/*/jobs/state", ["slurm:read"], "short"),
    _r("DELETE", "/slurm/*/jobs", ["slurm:jobs:manage"]),
    _r("POST", "/slurm/*/job/submit", ["slurm:jobs:manage"], extractor="job-submit"),
    _r("POST", "/slurm/*/job/allocate", ["slurm:jobs:manage"], extractor="job-submit"),
    _r("GET", "/slurm/*/job/*", ["slurm:read"], "short"),
    _r("POST", "/slurm/*/job/*", ["slurm:jobs:manage"], extractor="job-update"),
    _r("DELETE", "/slurm/*/job/*", ["slurm:jobs:manage"]),
    _r("GET", "/slurm/*/nodes", ["slurm:read"], "long"),
    _r("POST", "/slurm/*/nodes", ["slurm:nodes:manage"]),
    _r("POST", "/slurm/*/new/node", ["slurm:nodes:manage"]),
    _r("GET", "/slurm/*/node/*", ["slurm:read"], "long"),
    _r("POST", "/slurm/*/node/*", ["slurm:nodes:manage"]),
    _r("DELETE", "/slurm/*/node/*", ["slurm:nodes:manage"]),
    _r("GET", "/slurm/*/partitions", ["slurm:read"], "long"),
    _r("GET", "/slurm/*/partition/*", ["slurm:read"], "long"),
    _r("GET", "/slurm/*/reservations", ["slurm:read"], "normal"),
    _r("POST", "/slurm/*/reservations", ["slurm:reservations:manage"]),
    _r("POST", "/slurm/*/reservation", ["slurm:reservations:manage"]),
    _r("GET", "/slurm/*/reservation/*", ["slurm:read"], "normal"),
    _r("POST", "/slurm/*/reservation/*", ["slurm:reservations:manage"]),
    _r("DELETE", "/slurm/*/reservation/*", ["slurm:reservations:manage"]),
    _r("GET", "/slurm/*/shares", ["slurm:read"], "normal"),
    _r("GET", "/slurm/*/licenses", ["slurm:read"], "normal"),
    _r("GET", "/slurm/*/reconfigure", ["slurm:reconfigure"], groups=ADMIN_GROUPS),
    # database
    _r("GET", "/slurmdb/*/ping", ["slurmdb:read"], "short"),
    _r("GET", "/slurmdb/*/diag", ["slurmdb:read"], "short"),
    _r("GET", "/slurmdb/*/jobs", ["slurmdb:read"], "normal"),
    _r("GET", "/slurmdb/*/job/*", ["slurmdb:read"], "normal"),
    _r("GET", "/slurmdb/*/accounts", ["slurmdb:read"], "normal"),
    _r("POST", "/slurmdb/*/accounts", ["slurmdb:accounts:manage"], extractor="account-manage"),
    _r("GET", "/slurmdb/*/account/*", ["slurmdb:read"], "normal"),
    _r("DELETE", "/slurmdb/*/account/*", ["slurmdb:accounts:manage"], extractor="account-path"),
    _r(
        "POST",
        "/slurmdb/*/accounts_association",
        ["slurmdb:accounts_association:manage"],
        extractor="accounts-association",
    ),
    _r("GET", "/slurmdb/*/associations", ["slurmdb:read"], "normal"),
    _r("POST", "/slurmdb/*/associations", ["slurmdb:associations:manage"], extractor="association-manage"),
    _r("DELETE", "/slurmdb/*/associations", ["slurmdb:associations:manage"], extractor="association-query"),
    _r("GET", "/slurmdb/*/association", ["slurmdb:read"], "normal"),
    _r("DELETE", "/slurmdb/*/association", ["slurmdb:associations:manage"], extractor="association-query"),
    _r("GET", "/slurmdb/*/clusters", ["slurmdb:read"], "long"),
    _r("POST", "/slurmdb/*/clusters", ["slurmdb:clusters:manage"]),
    _r("GET", "/slurmdb/*/cluster/*", ["slurmdb:read"], "long"),
    _r("DELETE", "/slurmdb/*/cluster/*", ["slurmdb:clusters:manage"]),
    _r("GET", "/slurmdb/*/config", ["slurmdb:config:read"], "long"),
    _r("POST", "/slurmdb/*/config", ["slurmdb:config:manage"], cidrs=ADMIN_NETWORKS),
    _r("GET", "/slurmdb/*/qos", ["slurmdb:read"], "long"),
    _r("POST", "/slurmdb/*/qos", ["slurmdb:qos:manage"]),
    _r("GET", "/slurmdb/*/qos/*", ["slurmdb:read"], "long"),
    _r("DELETE", "/slurmdb/*/qos/*", ["slurmdb:qos:manage"]),
    _r("GET", "/slurmdb/*/tres", ["slurmdb:read"], "long"),
    _r("POST", "/slurmdb/*/tres", ["slurmdb:tres:manage"]),
    _r("GET", "/slurmdb/*/users", ["slurmdb:read"], "normal"),
    _r("POST", "/slurmdb/*/users", ["slurmdb:users:manage"], extractor="user-manage"),
    _r(
        "POST",
        "/slurmdb/*/users_association",
        ["slurmdb:users_association:manage"],
        extractor="users-association",
    ),
    _r("GET", "/slurmdb/*/user/*", ["slurmdb:read"], "normal"),
    _r("DELETE", "/slurmdb/*/user/*", ["slurmdb:users:manage"]),
    _r("GET", "/slurmdb/*/wckeys", ["slurmdb:read"], "long"),
    _r("POST", "/slurmdb/*/wckeys", ["slurmdb:wckeys:manage"]),
    _r("GET", "/slurmdb/*/wckey/*", ["slurmdb:read"], "long"),
    _r("DELETE", "/slurmdb/*/wckey/*", ["slurmdb:wckeys:manage"]),
    _r("GET", "/slurmdb/*/instances", ["slurmdb:read"], "normal"),
    _r("GET", "/slurmdb/*/instance", ["slurmdb:read"], "normal"),
    # gateway-native endpoints without a local implementation
    _r("GET", "/pact/self", ["pact:self"], handler="unavailable"),
    _r("GET", "/pact/user/*", ["pact:admin"], handler="unavailable"),
    _r("GET", "/debug/pprof/**", ["pprof:read"], handler="unavailable"),
]


def build_routes(raw: Sequence[dict]) -> tuple[RouteRule, ...]:
    return tuple(RouteRule.model_validate(r) for r in raw)
