"""Upstream handler: impersonation token upkeep and one subprocess per request."""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import os
import signal
from dataclasses import dataclass
from typing import Awaitable, Callable, Iterable, Mapping, Optional, Sequence

from .auth import Identity
from .clock import Clock
from .errors import GatewayError, TokenUnavailable
from .wire import WireError, WireRequest, WireResponse, parse_wire_response, serialize_wire

logger = logging.getLogger(__name__)

FORWARDED_HEADERS = ("Accept", "Content-Type", "Content-Length")
USER_TOKEN_HEADER = "X-Slurm-User-Token"
USER_NAME_HEADER = "X-Slurm-User-Name"


class MintError(Exception):
    pass


@dataclass(frozen=True)
class UpstreamToken:
    value: str
    minted_at: float
    expires_at: float

    def __post_init__(self) -> None:
        if not self.expires_at > self.minted_at:
            raise ValueError("token expires before it was minted")

    def valid_at(self, now: float, margin: float = 0.0) -> bool:
        return now < self.expires_at - margin


def parse_mint_output(output: str) -> str:
    """Token from minter stdout: a ``SLURM_JWT=<token>`` line or a bare JWT line."""
    for line in output.splitlines():
        line = line.strip()
        if line.startswith("export "):
            line = line[len("export ") :].strip()
        if line.startswith("SLURM_JWT="):
            value = line[len("SLURM_JWT=") :].strip().strip("'\"")
            if value:
                return value
        elif line.count(".") == 2 and " " not in line and "=" not in line:
            return line
    raise MintError("no token found in minter output")


def jwt_expiry(token: str) -> Optional[float]:
    """The ``exp`` claim, read without verification (the token is ours to hold, not to check)."""
    try:
        payload = token.split(".")[1]
        claims = json.loads(base64.urlsafe_b64decode(payload + "=" * (-len(payload) % 4)))
        exp = claims.get("exp")
        return float(exp) if isinstance(exp, (int, float)) else None
    except (IndexError, ValueError, AttributeError):
        return None


def minimal_env(allowlist: Iterable[str], extra: Mapping[str, str] | None = None) -> dict[str, str]:
    env = {k: os.environ[k] for k in allowlist if k in os.environ}
    env.update(extra or {})
    return env


class CommandMinter:
    """Runs the configured argv and reads the token from stdout."""

    def __init__(self, argv: Sequence[str], timeout: float = 10.0, env: Mapping[str, str] | None = None) -> None:
        self.argv = list(argv)
        self.timeout = timeout
        self.env = dict(env) if env is not None else None

    async def __call__(self) -> str:
        try:
            proc = await asyncio.create_subprocess_exec(
                *self.argv,
                stdin=asyncio.subprocess.DEVNULL,
                stdout=asyncio.subprocess.PIPE,
                stderr=asyncio.subprocess.PIPE,
                env=self.env,
                start_new_session=True,
            )
        except OSError as e:
            raise MintError(f"cannot run minter: {e}") from None
        try:
            out, err = await asyncio.wait_for(proc.communicate(), self.timeout)
        except asyncio.TimeoutError:
            _kill(proc)
            await proc.wait()
            raise MintError("minter timed out") from None
        if proc.returncode != 0:
            raise MintError(f"minter exited {proc.returncode}: {err.decode(errors='replace').strip()[:200]}")
        return parse_mint_output(out.decode(errors="replace"))


class TokenManager:
    """Keeps a valid impersonation token, re-minting at half its remaining life.

    Failed mints retry with exponential backoff while the previous token
    stays in use until it expires.
    """

    def __init__(
        self,
        minter: Callable[[], Awaitable[str]],
        clock: Clock,
        default_lifetime: float = 600.0,
        min_backoff: float = 1.0,
        max_backoff: float = 30.0,
        expiry_margin: float = 1.0,
    ) -> None:
        self.minter = minter
        self.clock = clock
        self.default_lifetime = default_lifetime
        self.min_backoff = min_backoff
        self.max_backoff = max_backoff
        self.expiry_margin = expiry_margin
        self.token: Optional[UpstreamToken] = None
        self.consecutive_failures = 0
        self.mint_attempts = 0
        self.mint_failures = 0
        self.last_error: Optional[str] = None
        self.next_refresh_at: float = clock.now()

    def current(self) -> UpstreamToken:
        token = self.token
        if token is None:
            raise TokenUnavailable("no upstream token has been minted yet")
        if not token.valid_at(self.clock.now(), self.expiry_margin):
            raise TokenUnavailable("upstream token expired and could not be renewed")
        return token

    async def refresh_once(self) -> float:
        """Attempt one mint; returns the absolute time of the next attempt."""
        now = self.clock.now()
        self.mint_attempts += 1
        try:
            value = await self.minter()
            expires = jwt_expiry(value)
            if expires is None:
                expires = now + self.default_lifetime
            if expires <= now + self.expiry_margin:
                raise MintError("minted token is already expired")
            token = UpstreamToken(value, now, expires)
        except Exception as e:
            self.mint_failures += 1
            self.consecutive_failures += 1
            self.last_error = str(e)
            backoff = min(self.max_backoff, self.min_backoff * 2 ** (self.consecutive_failures - 1))
            logger.warning("upstream token mint failed (attempt %d): %s", self.consecutive_failures, e)
            self.next_refresh_at = now + backoff
            return self.next_refresh_at
        self.token = token
        self.consecutive_failures = 0
        self.last_error = None
        self.next_refresh_at = now + (token.expires_at - now) / 2
        return self.next_refresh_at

    async def run(self, sleep: Callable[[float], Awaitable[None]] = asyncio.sleep) -> None:
        while True:
            await sleep(max(0.0, self.next_refresh_at - self.clock.now()))
            await self.refresh_once()


def prepare(
    method: str,
    target: str,
    client_headers: Iterable[tuple[str, str]],
    body: bytes,
    identity: Identity,
    token: UpstreamToken,
    host: str = "localhost",
) -> WireRequest:
    """Wire request carrying only allowlisted client headers plus impersonation headers."""
    client_headers = list(client_headers)

    def values(name: str) -> list[str]:
        return [v for k, v in client_headers if k.lower() == name.lower()]

    headers = [("Host", host)]
    accept = values("accept")
    if accept:
        headers.append(("Accept", ", ".join(accept)))
    ctype = values("content-type")
    if ctype:
        headers.append(("Content-Type", ctype[0]))
    if body or values("content-length"):
        headers.append(("Content-Length", str(len(body))))
    headers.append((USER_NAME_HEADER, identity.username))
    headers.append((USER_TOKEN_HEADER, token.value))
    return WireRequest(method.upper(), target, tuple(headers), body)


def _kill(proc: asyncio.subprocess.Process) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            proc.kill()
        except ProcessLookupError:
            pass


async def invoke_inetd(
    argv: Sequence[str], data: bytes, timeout: float, env: Mapping[str, str] | None = None
) -> tuple[int, bytes]:
    """Spawn the upstream, feed ``data`` on stdin, return (exit code, stdout)."""
    try:
        proc = await asyncio.create_subprocess_exec(
            *argv,
            stdin=asyncio.subprocess.PIPE,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE,
            env=dict(env) if env is not None else {},
            start_new_session=True,
        )
    except OSError as e:
        raise GatewayError(502, "upstream-spawn-failed", f"cannot start upstream: {e.strerror or e}") from None
    try:
        out, err = await asyncio.wait_for(proc.communicate(data), timeout)
    except asyncio.TimeoutError:
        _kill(proc)
        await proc.wait()
        raise GatewayError(504, "upstream-timeout", f"upstream did not answer within {timeout:g}s") from None
    except asyncio.CancelledError:
        _kill(proc)
        await proc.wait()
        raise
    if err:
        logger.info("upstream stderr (pid %d): %s", proc.pid, err.decode(errors="replace").strip()[:2000])
    return proc.returncode, out


@dataclass
class Outcome:
    at: float
    ok: bool
    detail: str


class UpstreamHandler:
    def __init__(
        self,
        argv: Sequence[str],
        tokens: TokenManager,
        clock: Clock,
        timeout: float = 30.0,
        concurrency: int = 64,
        env_allowlist: Iterable[str] = (),
        env: Mapping[str, str] | None = None,
        host: str = "localhost",
    ) -> None:
        self.argv = list(argv)
        self.tokens = tokens
        self.clock = clock
        self.timeout = timeout
        self.env_allowlist = tuple(env_allowlist)
        self.env = dict(env or {})
        self.host = host
        self._slots = asyncio.Semaphore(concurrency)
        self.spawns = 0
        self.failures = 0
        self.last_outcome: Optional[Outcome] = None

    def _record(self, ok: bool, detail: str) -> None:
        self.last_outcome = Outcome(self.clock.now(), ok, detail)
        if not ok:
            self.failures += 1

    async def __call__(
        self,
        method: str,
        target: str,
        client_headers: Iterable[tuple[str, str]],
        body: bytes,
        identity: Optional[Identity],
    ) -> WireResponse:
        if identity is None:
            raise GatewayError(401, "authentication-required", "upstream requests need an identity to impersonate")
        async with self._slots:
            token = self.tokens.current()
            wire = prepare(method, target, client_headers, body, identity, token, self.host)
            try:
                data = serialize_wire(wire)
            except WireError as e:
                raise GatewayError(400, "bad-request", str(e)) from None
            self.spawns += 1
            try:
                code, out = await invoke_inetd(
                    self.argv, data, self.timeout, minimal_env(self.env_allowlist, self.env)
                )
            except GatewayError as e:
                self._record(False, e.reason)
                raise
        try:
            resp = parse_wire_response(out)
        except WireError as e:
            reason = "upstream-protocol-error" if code == 0 else f"upstream-exit-{code}"
            self._record(False, reason)
            raise GatewayError(502, reason, f"unreadable upstream response: {e}") from None
        if resp.status >= 500:
            self._record(False, f"upstream-status-{resp.status}")
            raise GatewayError(502, "upstream-error", f"upstream answered {resp.status}", upstream=resp)
        self._record(True, f"status {resp.status}")
        return resp
