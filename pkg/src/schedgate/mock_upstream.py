"""Stand-in for slurmrestd in inetd mode: one request on stdin, one response on stdout.

Environment:

``MOCK_DELAY_MS``   sleep this long before answering
``MOCK_FAIL=1``     answer every request with the 500 fixture
``MOCK_FIXTURES``   JSON file of extra fixtures, tried before the defaults
``MOCK_SPAWN_LOG``  append one line per invocation (spawn counting in tests)

Any header outside the gateway's wire allowlist fails the exchange with a
400 fixture naming the header.
"""

from __future__ import annotations

import json
import os
import re
import sys
import time
from typing import Mapping, Optional

from .wire import WireError, WireRequest, WireResponse, parse_wire_request, serialize_response

ALLOWED_HEADERS = frozenset(
    {"host", "accept", "content-type", "content-length", "x-slurm-user-token", "x-slurm-user-name"}
)
ACCOUNT_PLACEHOLDER = "$JOB_ACCOUNT"
PATH_ACCOUNT_PLACEHOLDER = "$PATH_LAST"

_META = {
    "plugin": {"type": "openapi/slurmctld", "name": "Slurm OpenAPI slurmctld", "data_parser": "data_parser/v0.0.43"},
    "client": {"source": "inetd"},
    "slurm": {"version": {"major": "25", "micro": "0", "minor": "05"}, "release": "25.05.0", "cluster": "mock"},
}


def _envelope(**payload) -> dict:
    return {**payload, "meta": _META, "errors": [], "warnings": []}


def _error_envelope(message: str, number: int) -> dict:
    return {"meta": _META, "errors": [{"description": message, "error_number": number, "error": message, "source": "mock"}], "warnings": []}


# (method, path regex) -> (status, body). Bodies are JSON-serialized compactly.
DEFAULT_FIXTURES: list[tuple[str, str, int, dict]] = [
    (
        "GET",
        r"/slurm(db)?/v[0-9.]+/ping",
        200,
        _envelope(pings=[{"hostname": "ctl1", "pinged": "UP", "responding": True, "latency": 142, "mode": "primary", "primary": True}]),
    ),
    (
        "GET",
        r"/slurm/v[0-9.]+/nodes",
        200,
        _envelope(
            nodes=[
                {"name": "node0001", "state": ["IDLE"], "cpus": 64, "real_memory": 256000, "partitions": ["work1"]},
                {"name": "node0002", "state": ["ALLOCATED"], "cpus": 64, "real_memory": 256000, "partitions": ["work1"]},
            ],
            last_update={"set": True, "infinite": False, "number": 1700000000},
        ),
    ),
    (
        "GET",
        r"/slurm/v[0-9.]+/jobs",
        200,
        _envelope(
            jobs=[
                {"job_id": 101, "account": "rcd_test", "user_name": "alice", "job_state": ["RUNNING"], "partition": "work1"},
                {"job_id": 102, "account": "physics", "user_name": "bob", "job_state": ["PENDING"], "partition": "work1"},
            ],
            last_backfill={"set": True, "infinite": False, "number": 1700000000},
        ),
    ),
    (
        "POST",
        r"/slurm/v[0-9.]+/job/submit",
        200,
        _envelope(job_id=4242, step_id="batch", job_submit_user_msg="", result={"job_id": 4242, "account": ACCOUNT_PLACEHOLDER}),
    ),
    (
        "DELETE",
        r"/slurmdb/v[0-9.]+/account/[^/]+",
        200,
        _envelope(removed_accounts=[PATH_ACCOUNT_PLACEHOLDER]),
    ),
]

UNAUTHORIZED = (401, _error_envelope("Authentication failure", 1007))
BAD_REQUEST = (400, _error_envelope("Unable to parse request", 9001))
FAILURE = (500, _error_envelope("Unable to contact slurm controller (connect failure)", 1007))
NOT_FOUND = (404, _error_envelope("Unable to find requested URL", 9002))


def _dump(body) -> bytes:
    return json.dumps(body, separators=(",", ":"), sort_keys=False).encode()


def _respond(status: int, body, extra_headers=()) -> bytes:
    raw = body if isinstance(body, bytes) else _dump(body)
    headers = (("Content-Type", "application/json"), ("Content-Length", str(len(raw)))) + tuple(extra_headers)
    return serialize_response(WireResponse(status, headers, raw))


def _job_account(req: WireRequest) -> str:
    try:
        doc = json.loads(req.body)
        account = doc["job"]["account"]
    except (ValueError, KeyError, TypeError):
        return ""
    return account if isinstance(account, str) else ""


def _render(body, req: WireRequest) -> bytes:
    raw = _dump(body).decode()
    if ACCOUNT_PLACEHOLDER in raw:
        raw = raw.replace(ACCOUNT_PLACEHOLDER, json.dumps(_job_account(req))[1:-1])
    if PATH_ACCOUNT_PLACEHOLDER in raw:
        last = req.target.split("?", 1)[0].rstrip("/").rsplit("/", 1)[-1]
        raw = raw.replace(PATH_ACCOUNT_PLACEHOLDER, json.dumps(last)[1:-1])
    return raw.encode()


def load_fixtures(path: Optional[str]) -> list[tuple[str, str, int, object]]:
    if not path:
        return []
    with open(path) as f:
        items = json.load(f)
    return [(i.get("method", "GET").upper(), i["path"], int(i.get("status", 200)), i["body"]) for i in items]


def match_fixture(req: WireRequest, fixtures) -> Optional[tuple[int, object]]:
    path = req.target.split("?", 1)[0]
    for method, pattern, status, body in fixtures:
        if method in (req.method, "*") and re.fullmatch(pattern, path):
            return status, body
    return None


def serve_once(data: bytes, env: Mapping[str, str]) -> tuple[bytes, int]:
    """Answer one serialized request; returns (stdout bytes, exit code)."""
    try:
        req = parse_wire_request(data)
    except WireError as e:
        status, body = BAD_REQUEST
        return _respond(status, {**body, "errors": [{**body["errors"][0], "description": str(e)}]}), 0

    unexpected = sorted({k for k, _ in req.headers if k.lower() not in ALLOWED_HEADERS})
    if unexpected:
        status, body = BAD_REQUEST
        detail = "unexpected header(s): " + ", ".join(unexpected)
        return _respond(status, {**body, "errors": [{**body["errors"][0], "description": detail}]}), 0

    if not req.header("x-slurm-user-token") or not req.header("x-slurm-user-name"):
        return _respond(*UNAUTHORIZED), 0

    delay = env.get("MOCK_DELAY_MS")
    if delay:
        time.sleep(int(delay) / 1000.0)

    if env.get("MOCK_FAIL") == "1":
        return _respond(*FAILURE), 0

    found = match_fixture(req, load_fixtures(env.get("MOCK_FIXTURES")) + DEFAULT_FIXTURES)
    if found is None:
        return _respond(*NOT_FOUND), 0
    status, body = found
    return _respond(status, _render(body, req)), 0


def main() -> int:
    spawn_log = os.environ.get("MOCK_SPAWN_LOG")
    if spawn_log:
        with open(spawn_log, "a") as f:
            f.write(f"{os.getpid()}\n")
    try:
        data = sys.stdin.buffer.read()
        out, code = serve_once(data, os.environ)
        sys.stdout.buffer.write(out)
        sys.stdout.buffer.flush()
    except OSError as e:
        print(f"mock upstream I/O failure: {e}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
