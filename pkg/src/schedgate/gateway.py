"""The request pipeline: route, authenticate, authorize, cache, upstream."""

from __future__ import annotations

import asyncio
import logging
import time
import uuid
from collections import Counter, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Mapping, Optional

from .auth import WWW_AUTHENTICATE, AuthError, Identity, authenticate
from .authz import authorize
from .backend import CacheBackend, MemoryBackend
from .cache import ResponseCache, make_key, parse_cache_control
from .clock import Clock, SystemClock
from .config import ConfigError, ServiceConfig
from .errors import GatewayError
from .models import ComponentStatus, ErrorBody, ErrorDetail, HealthReport
from .munge import CredentialDecoder, DevHmacDecoder
from .registry import FileWatcher, GroupMap, load_group_map, load_token_registry
from .routes import RouteRule, match_route
from .upstream import CommandMinter, TokenManager, UpstreamHandler, minimal_env
from .wire import WireResponse, header_value, without_headers

logger = logging.getLogger(__name__)

REQUEST_ID_HEADER = "X-Request-Id"
STAGES = ("route", "auth", "authz", "cache", "upstream")
_HOP_BY_HOP = ("connection", "keep-alive", "transfer-encoding", "proxy-connection", "upgrade", "te", "trailer")


@dataclass
class GatewayRequest:
    method: str
    path: str
    query: str = ""
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    source_address: Optional[str] = None
    http_version: str = "1.1"

    @property
    def target(self) -> str:
        return f"{self.path}?{self.query}" if self.query else self.path

    def header(self, name: str) -> Optional[str]:
        return header_value(self.headers, name)


@dataclass
class RequestContext:
    request_id: str
    arrival: float
    source_address: Optional[str]
    identity: Optional[Identity] = None
    route: Optional[RouteRule] = None
    cache_status: Optional[str] = None
    status: Optional[int] = None
    stages: list[tuple[str, float]] = field(default_factory=list)

    @contextmanager
    def stage(self, name: str):
        index = len(self.stages)
        self.stages.append((name, 0.0))
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[index] = (name, time.perf_counter() - start)

    @property
    def stage_names(self) -> list[str]:
        return [name for name, _ in self.stages]


Handler = Callable[[GatewayRequest, RequestContext], Awaitable[WireResponse]]


def json_response(status: int, model, extra_headers=()) -> WireResponse:
    body = model.model_dump_json(exclude_none=True).encode()
    headers = (("Content-Type", "application/json"), ("Content-Length", str(len(body)))) + tuple(extra_headers)
    return WireResponse(status, headers, body)


def error_response(err: GatewayError, request_id: str = "") -> WireResponse:
    if err.upstream is not None:
        up = err.upstream
        return WireResponse(err.status, without_headers(up.headers, *_HOP_BY_HOP), up.body)
    body = ErrorBody(
        errors=[ErrorDetail(error=err.message, reason=err.reason, status=err.status)],
        meta={"request_id": request_id} if request_id else {},
    )
    extra = (("WWW-Authenticate", WWW_AUTHENTICATE),) if err.status == 401 else ()
    return json_response(err.status, body, extra)


# Always present in the deep health payload, zero until first incremented.
REPORTED_COUNTERS = ("requests", "auth_failures", "authz_denials", "account_checks", "cache_hit", "cache_miss", "cache_stale")


class Gateway:
    """Owns shared state (snapshots, cache, token manager) and runs the pipeline."""

    def __init__(
        self,
        config: ServiceConfig,
        *,
        clock: Optional[Clock] = None,
        minter: Optional[Callable[[], Awaitable[str]]] = None,
        backend: Optional[CacheBackend] = None,
        decoder: Optional[CredentialDecoder] = None,
        handlers: Optional[Mapping[str, Handler]] = None,
    ) -> None:
        self.config = config
        self.clock = clock or SystemClock()
        self.registry = FileWatcher(config.token_registry_path, load_token_registry, config.registry_reload_interval)
        self.group_map: Optional[FileWatcher[GroupMap]] = None
        if config.group_map_path is not None:
            self.group_map = FileWatcher(config.group_map_path, load_group_map, config.registry_reload_interval)
        if decoder is None and config.dev_credential_key:
            decoder = DevHmacDecoder(config.dev_credential_key)
        self.decoder = decoder
        self.backend = backend or MemoryBackend(config.cache_capacity)
        self.cache = ResponseCache(self.backend, self.clock, config.fallback_ttl)
        if minter is None:
            minter = CommandMinter(
                config.token_mint_command,
                config.token_mint_timeout,
                env=minimal_env(config.upstream_env_allowlist, config.upstream_env),
            )
        self.tokens = TokenManager(minter, self.clock, config.token_default_lifetime)
        self.upstream = UpstreamHandler(
            config.upstream_command,
            self.tokens,
            self.clock,
            timeout=config.upstream_timeout,
            concurrency=config.upstream_concurrency,
            env_allowlist=config.upstream_env_allowlist,
            env=config.upstream_env,
            host=config.upstream_host,
        )
        self.counters: Counter[str] = Counter()
        self.recent: deque[RequestContext] = deque(maxlen=512)
        self.handlers: dict[str, Handler] = {
            "upstream": self._handle_upstream,
            "health": self._handle_health,
            "health-deep": self._handle_health_deep,
            "unavailable": self._handle_unavailable,
        }
        self.handlers.update(handlers or {})
        self._tasks: list[asyncio.Task] = []
        self._inflight = 0
        self._drained = asyncio.Event()
        self._drained.set()
        unknown = {r.handler for r in config.route_table} - set(self.handlers)
        if unknown:
            raise ConfigError(f"routes name unregistered handler(s): {', '.join(sorted(unknown))}")

    def register_handler(self, name: str, handler: Handler) -> None:
        """Extension point for gateway-native endpoints, keyed by RouteRule.handler."""
        self.handlers[name] = handler

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        await self.tokens.refresh_once()
        if self.tokens.token is None:
            logger.error("initial upstream token mint failed; upstream routes will answer 503")
        self._tasks = [asyncio.ensure_future(self.tokens.run()), asyncio.ensure_future(self.registry.run())]
        if self.group_map is not None:
            self._tasks.append(asyncio.ensure_future(self.group_map.run()))

    async def stop(self, grace: Optional[float] = None) -> None:
        grace = self.config.shutdown_grace_seconds if grace is None else grace
        try:
            await asyncio.wait_for(self._drained.wait(), grace)
        except asyncio.TimeoutError:
            logger.warning("shutdown grace elapsed with %d request(s) in flight", self._inflight)
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks = []

    # -- pipeline -----------------------------------------------------------

    async def handle(self, req: GatewayRequest) -> WireResponse:
        ctx = RequestContext(uuid.uuid4().hex, self.clock.now(), req.source_address)
        self._inflight += 1
        self._drained.clear()
        self.counters["requests"] += 1
        try:
            resp = await self._pipeline(req, ctx)
        except GatewayError as e:
            resp = error_response(e, ctx.request_id)
        except Exception:
            logger.exception("unhandled error for %s %s", req.method, req.path)
            resp = error_response(GatewayError(500, "internal-error", "internal gateway error"), ctx.request_id)
        finally:
            self._inflight -= 1
            if not self._inflight:
                self._drained.set()
        ctx.status = resp.status
        self.recent.append(ctx)
        headers = without_headers(resp.headers, REQUEST_ID_HEADER) + ((REQUEST_ID_HEADER, ctx.request_id),)
        return WireResponse(resp.status, headers, resp.body, resp.reason)

    async def _pipeline(self, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        with ctx.stage("route"):
            route = match_route(self.config.route_table, req.method, req.path)
            if route is None:
                raise GatewayError(404, "no-route", f"no route for {req.method} {req.path}")
            ctx.route = route

        with ctx.stage("auth"):
            try:
                identity = authenticate(
                    req.headers,
                    req.source_address,
                    self.registry.current,
                    self.decoder,
                    self.clock,
                    self.config.munge_default_scopes,
                )
            except AuthError as e:
                self.counters["auth_failures"] += 1
                logger.info("authentication failed from %s: %s", req.source_address, e.reason)
                raise GatewayError(401, "unauthenticated", "invalid credentials") from None
            ctx.identity = identity

        with ctx.stage("authz"):
            groups = self.group_map.current if self.group_map is not None else GroupMap()
            decision = authorize(
                route,
                identity,
                req.method,
                req.target,
                req.body,
                groups,
                req.source_address,
                on_account_check=self._count_account_check,
            )
            if not decision.allow:
                self.counters["authz_denials"] += 1
                logger.info(
                    "denied %s %s for %s: %s (%s)",
                    req.method,
                    req.path,
                    identity.username if identity else "-",
                    decision.requirement,
                    decision.detail,
                )
                if decision.status == 401:
                    raise GatewayError(401, "unauthenticated", "authentication required")
                raise GatewayError(403, "forbidden", "forbidden")

        handler = self.handlers[route.handler]
        if route.cache_policy is not None and req.method.upper() == "GET":
            with ctx.stage("cache"):
                key = make_key(
                    req.method,
                    req.path,
                    req.query,
                    req.header("accept"),
                    identity.username if (self.config.per_user_cache and identity) else None,
                )
                result = await self.cache.serve(
                    key,
                    self.config.policies[route.cache_policy],
                    parse_cache_control(req.header("cache-control")),
                    lambda: self._timed(handler, req, ctx),
                    req.method,
                )
            ctx.cache_status = result.status
            self.counters["cache_" + result.status.lower()] += 1
            return WireResponse(result.response.status, result.headers(), result.response.body)
        return await self._timed(handler, req, ctx)

    async def _timed(self, handler: Handler, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        with ctx.stage("upstream"):
            resp = await handler(req, ctx)
        return WireResponse(resp.status, without_headers(resp.headers, *_HOP_BY_HOP), resp.body, resp.reason)

    def _count_account_check(self) -> None:
        self.counters["account_checks"] += 1

    # -- handlers -----------------------------------------------------------

    async def _handle_upstream(self, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        return await self.upstream(req.method, req.target, req.headers, req.body, ctx.identity)

    async def _handle_unavailable(self, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        raise GatewayError(501, "not-implemented", f"{req.path} is not provided by this deployment")

    async def _handle_health(self, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        return json_response(200, HealthReport(status="ok"))

    async def _handle_health_deep(self, req: GatewayRequest, ctx: RequestContext) -> WireResponse:
        report = self.health(deep=True)
        return json_response(200 if report.status == "ok" else 503, report)

    def health(self, deep: bool = False) -> HealthReport:
        if not deep:
            return HealthReport(status="ok")
        now = self.clock.now()
        components = {
            "registry": self._registry_status(now),
            "cache": self._cache_status(),
            "token": self._token_status(now),
            "upstream": self._upstream_status(now),
        }
        status = "ok" if all(c.ok for c in components.values()) else "degraded"
        counters = {name: 0 for name in REPORTED_COUNTERS}
        counters.update(self.counters)
        counters.update(
            cache_generations=self.cache.generations,
            upstream_spawns=self.upstream.spawns,
            upstream_failures=self.upstream.failures,
            registry_reload_failures=self.registry.reload_failures,
            token_mint_failures=self.tokens.mint_failures,
        )
        return HealthReport(status=status, components=components, counters=counters)

    def _registry_status(self, now: float) -> ComponentStatus:
        snap = self.registry.current
        err = self.registry.last_error
        if self.group_map is not None and self.group_map.last_error:
            err = err or self.group_map.last_error
        return ComponentStatus(
            ok=err is None,
            detail=err or "",
            data={"records": len(snap), "snapshot_age": round(time.time() - snap.loaded_at, 3)},
        )

    def _cache_status(self) -> ComponentStatus:
        try:
            ok = self.backend.ping()
        except Exception as e:
            return ComponentStatus(ok=False, detail=f"backend unreachable: {e}")
        data = {"hits": self.cache.hits, "misses": self.cache.misses, "stale": self.cache.stale_serves}
        if isinstance(self.backend, MemoryBackend):
            data.update(entries=len(self.backend), capacity=self.backend.capacity, evictions=self.backend.evictions)
        return ComponentStatus(ok=ok, detail="" if ok else "backend unreachable", data=data)

    def _token_status(self, now: float) -> ComponentStatus:
        token = self.tokens.token
        if token is None:
            return ComponentStatus(ok=False, detail=f"no upstream token: {self.tokens.last_error or 'not minted'}")
        valid = token.valid_at(now, self.tokens.expiry_margin)
        return ComponentStatus(
            ok=valid,
            detail="" if valid else f"upstream token expired: {self.tokens.last_error or 'renewal pending'}",
            data={"age": round(now - token.minted_at, 3), "expires_in": round(token.expires_at - now, 3)},
        )

    def _upstream_status(self, now: float) -> ComponentStatus:
        last = self.upstream.last_outcome
        if last is None:
            return ComponentStatus(ok=True, detail="no upstream calls yet", data={"spawns": 0})
        return ComponentStatus(
            ok=last.ok,
            detail=last.detail,
            data={"spawns": self.upstream.spawns, "last_call_age": round(now - last.at, 3)},
        )
