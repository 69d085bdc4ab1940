from __future__ import annotations

import sys
import textwrap
from contextlib import asynccontextmanager
from pathlib import Path

import httpx
import jwt
import pytest

from schedgate.app import create_app
from schedgate.clock import FakeClock
from schedgate.config import config_from_dict
from schedgate.gateway import Gateway

MOCK_ARGV = [sys.executable, "-m", "schedgate.mock_upstream"]
CLIENT_ADDR = "10.0.0.7"
DEV_KEY = b"test-credential-domain"

TOKENS_TOML = """\
[tokens.reader]
token = "tok-reader"
username = "alice"
scopes = ["slurm:read", "slurmdb:read"]

[tokens.rcd]
token = "tok-rcd"
username = "svc-coldfront"
scopes = ["slurm:read", "slurmdb:read", "slurm:jobs:manage", "slurmdb:accounts:manage"]
accounts = ["^rcd.*"]

[tokens.submitter]
token = "tok-submit"
username = "bob"
scopes = ["slurm:read", "slurm:jobs:manage", "slurmdb:accounts:manage"]

[tokens.health]
token = "tok-health"
username = "svc-monitor"
scopes = ["health:check"]

[tokens.retired]
token = "tok-retired"
username = "old"
scopes = ["slurm:read"]
disabled = true
"""

GROUPS_TXT = """\
alice: researchers
admin1: hpc-admins
"""


@pytest.fixture
def anyio_backend():
    return "asyncio"


class FakeMinter:
    """Async stand-in for the mint command: HS256 JWTs with exp = now + lifetime."""

    def __init__(self, clock, lifetime: float = 600.0) -> None:
        self.clock = clock
        self.lifetime = lifetime
        self.fail = False
        self.calls = 0

    async def __call__(self) -> str:
        self.calls += 1
        if self.fail:
            raise RuntimeError("minter broken")
        now = self.clock.now()
        claims = {"sun": "slurm", "iat": int(now), "exp": int(now + self.lifetime), "n": self.calls}
        return jwt.encode(claims, "k" * 32, algorithm="HS256")


def write_registry(tmp_path: Path, text: str = TOKENS_TOML) -> Path:
    path = tmp_path / "tokens.toml"
    path.write_text(text)
    return path


def make_config(tmp_path: Path, **overrides):
    write_registry(tmp_path)
    (tmp_path / "groups.txt").write_text(GROUPS_TXT)
    spawn_log = tmp_path / "spawns.log"
    raw = {
        "upstream_command": MOCK_ARGV,
        "token_mint_command": ["/bin/false"],
        "token_registry_path": "tokens.toml",
        "group_map_path": "groups.txt",
        "upstream_env": {"MOCK_SPAWN_LOG": str(spawn_log)},
        "dev_credential_key": DEV_KEY.decode(),
        "registry_reload_interval": 1,
    }
    raw.update(overrides)
    return config_from_dict(raw, base_dir=tmp_path)


def spawn_count(tmp_path: Path) -> int:
    log = tmp_path / "spawns.log"
    return len(log.read_text().splitlines()) if log.exists() else 0


@asynccontextmanager
async def running(gateway: Gateway, client_addr: str = CLIENT_ADDR):
    """Started gateway plus an httpx client speaking ASGI to it."""
    await gateway.start()
    transport = httpx.ASGITransport(app=create_app(gateway, manage_lifecycle=False), client=(client_addr, 1234))
    try:
        async with httpx.AsyncClient(transport=transport, base_url="http://gateway") as client:
            yield client
    finally:
        await gateway.stop(grace=1)


def build_gateway(tmp_path: Path, clock=None, minter=None, **overrides) -> Gateway:
    clock = clock or FakeClock()
    minter = minter or FakeMinter(clock)
    return Gateway(make_config(tmp_path, **overrides), clock=clock, minter=minter)


def bearer(token: str) -> dict[str, str]:
    return {"Authorization": f"Bearer {token}"}


def dedent(s: str) -> str:
    return textwrap.dedent(s).lstrip("\n")


# -- acceptance reporting ----------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": 0, "failed": 0})
    entry["passed" if report.passed else "failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "FAIL" if e["failed"] else "PASS"
        terminalreporter.write_line(f"{verdict} criterion {number:>2}: {e['title']} ({e['passed']} passed, {e['failed']} failed)")
