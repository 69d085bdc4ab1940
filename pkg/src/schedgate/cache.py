"""Response cache: policy-clamped lifetimes, stale-if-error fallback, coalesced misses."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Awaitable, Callable, Optional
from urllib.parse import parse_qsl, urlencode

from .backend import CacheBackend, CacheEntry
from .clock import Clock
from .coalesce import SingleFlight
from .config import CachePolicy
from .errors import GatewayError
from .wire import WireResponse, without_headers

logger = logging.getLogger(__name__)

STALE_WARNING = '110 - "Response is Stale"'
CACHEABLE_STATUSES = frozenset({200, 203})
# Never stored or replayed.
HOP_BY_HOP = ("connection", "keep-alive", "transfer-encoding", "proxy-connection", "upgrade", "te", "trailer")


def compute_freshness(generation_duration: float, policy: CachePolicy) -> float:
    lifetime = max(0.0, generation_duration) + policy.buffer_seconds
    return min(max(lifetime, policy.min_seconds), policy.max_seconds)


def cacheability(status: int, method: str) -> bool:
    return method.upper() == "GET" and status in CACHEABLE_STATUSES


def accept_class(accept: Optional[str]) -> str:
    if not accept:
        return "json"
    first = accept.split(",", 1)[0].split(";", 1)[0].strip().lower()
    if first in ("*/*", "application/*") or "json" in first:
        return "json"
    if "yaml" in first:
        return "yaml"
    return "other"


@dataclass(frozen=True)
class CacheKey:
    method: str
    path: str
    query: str
    accept: str
    user: str = ""

    def __str__(self) -> str:
        parts = [self.method, self.path, self.query, self.accept]
        if self.user:
            parts.insert(0, "user=" + self.user)
        return "|".join(parts)


def make_key(method: str, path: str, query: str, accept: Optional[str], user: Optional[str] = None) -> CacheKey:
    """Canonical key; ``user`` is only set for per-user caching."""
    norm = "/" + "/".join(seg for seg in path.split("/") if seg)
    pairs = sorted(parse_qsl(query, keep_blank_values=True))
    return CacheKey(method.upper(), norm, urlencode(pairs), accept_class(accept), user or "")


class Freshness(enum.Enum):
    FRESH = "fresh"
    STALE = "stale"
    MISS = "miss"


def lookup(key: CacheKey, now: float, backend: CacheBackend) -> tuple[Freshness, Optional[CacheEntry]]:
    try:
        entry = backend.get(str(key), now)
    except Exception:
        logger.exception("cache backend read failed")
        return Freshness.MISS, None
    if entry is None:
        return Freshness.MISS, None
    if now < entry.stale_at:
        return Freshness.FRESH, entry
    return Freshness.STALE, entry


@dataclass(frozen=True)
class Directives:
    no_cache: bool = False
    stale_if_error: bool = False
    stale_if_error_seconds: Optional[float] = None


def parse_cache_control(value: Optional[str]) -> Directives:
    """Only ``no-cache`` and ``stale-if-error[=N]`` are honored."""
    no_cache = stale = False
    seconds = None
    for part in (value or "").split(","):
        name, _, arg = part.strip().partition("=")
        name = name.strip().lower()
        if name == "no-cache":
            no_cache = True
        elif name == "stale-if-error":
            stale = True
            arg = arg.strip().strip('"')
            if arg:
                try:
                    seconds = max(0.0, float(arg))
                except ValueError:
                    seconds = None
    return Directives(no_cache, stale, seconds)


@dataclass(frozen=True)
class CacheResult:
    response: WireResponse
    status: str  # HIT | MISS | STALE
    age: Optional[int] = None

    def headers(self) -> tuple[tuple[str, str], ...]:
        extra = [("X-Cache", self.status)]
        if self.age is not None:
            extra.insert(0, ("Age", str(self.age)))
        if self.status == "STALE":
            extra.append(("Warning", STALE_WARNING))
        base = without_headers(self.response.headers, "age", "x-cache", "warning")
        return base + tuple(extra)


def _entry_response(entry: CacheEntry) -> WireResponse:
    return WireResponse(entry.status, entry.headers, entry.body)


class ResponseCache:
    def __init__(self, backend: CacheBackend, clock: Clock, fallback_ttl: float) -> None:
        self.backend = backend
        self.clock = clock
        self.fallback_ttl = fallback_ttl
        self.flights = SingleFlight()
        self.hits = 0
        self.misses = 0
        self.stale_serves = 0
        self.generations = 0
        self.write_failures = 0

    async def _generate(
        self, key: CacheKey, policy: CachePolicy, method: str, handler: Callable[[], Awaitable[WireResponse]]
    ) -> WireResponse:
        self.generations += 1
        start = self.clock.now()
        resp = await handler()
        done = self.clock.now()
        headers = without_headers(resp.headers, *HOP_BY_HOP)
        resp = WireResponse(resp.status, headers, resp.body, resp.reason)
        if cacheability(resp.status, method):
            lifetime = compute_freshness(done - start, policy)
            entry = CacheEntry(done, done + lifetime, resp.status, headers, resp.body)
            try:
                self.backend.put(str(key), entry, self.fallback_ttl, done)
            except Exception:
                self.write_failures += 1
                logger.exception("cache backend write failed")
        return resp

    def _stale_fallback(self, key: CacheKey, directives: Directives) -> Optional[CacheResult]:
        if not directives.stale_if_error:
            return None
        now = self.clock.now()
        _, entry = lookup(key, now, self.backend)
        if entry is None:
            return None
        if directives.stale_if_error_seconds is not None and now - entry.stale_at > directives.stale_if_error_seconds:
            return None
        self.stale_serves += 1
        return CacheResult(_entry_response(entry), "STALE", int(now - entry.generated_at))

    async def serve(
        self,
        key: CacheKey,
        policy: CachePolicy,
        directives: Directives,
        handler: Callable[[], Awaitable[WireResponse]],
        method: str = "GET",
    ) -> CacheResult:
        """Serve from cache when fresh, otherwise generate once per key flight.

        ``handler`` signals failure by raising GatewayError; a 5xx failure
        falls back to a stored entry only if the caller sent stale-if-error.
        """
        now = self.clock.now()
        state, entry = lookup(key, now, self.backend)
        if state is Freshness.FRESH and not directives.no_cache:
            self.hits += 1
            return CacheResult(_entry_response(entry), "HIT", int(now - entry.generated_at))
        try:
            resp = await self.flights.do(key, lambda: self._generate(key, policy, method, handler))
        except GatewayError as e:
            if e.status < 500:
                raise
            fallback = self._stale_fallback(key, directives)
            if fallback is None:
                raise
            logger.info("serving stale %s after upstream failure %s", key, e.reason)
            return fallback
        self.misses += 1
        return CacheResult(resp, "MISS")
