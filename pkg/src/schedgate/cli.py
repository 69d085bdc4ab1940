"""Command-line entry points: serve, mint-token, check-config, health."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional, Sequence

from .config import CONFIG_ENV_VAR, ConfigError, ServiceConfig, load_config
from .routes import BUILTIN_HANDLERS


def _config_path(args) -> str:
    path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        raise ConfigError(f"no --config given and {CONFIG_ENV_VAR} is unset")
    return path


def _toml_str(s: str) -> str:
    return json.dumps(s)


def _toml_list(items) -> str:
    return "[" + ", ".join(_toml_str(i) for i in items) + "]"


def cmd_mint_token(args) -> int:
    from .auth import mint_bearer_token

    token = mint_bearer_token(args.user, time.time(), args.validity)
    label = args.label or args.user
    print(token)
    print()
    print(f"[tokens.{_toml_str(label)}]")
    print(f"token = {_toml_str(token)}")
    print(f"username = {_toml_str(args.user)}")
    print(f"scopes = {_toml_list(args.scope or [])}")
    print(f"accounts = {_toml_list(args.account or [])}")
    return 0


def route_matrix(config: ServiceConfig) -> list[str]:
    rows = [("METHOD", "PATH", "SCOPES (any of)", "CACHE", "ACCOUNTS", "EXTRA", "HANDLER")]
    for r in config.route_table:
        extra = []
        if r.groups is not None:
            extra.append("groups=" + ",".join(sorted(r.groups)))
        if r.cidrs is not None:
            extra.append("cidrs=" + ",".join(str(c) for c in r.cidrs))
        rows.append(
            (
                r.method,
                r.path,
                ",".join(sorted(r.scopes)) or "(public)",
                r.cache_policy or "-",
                r.account_extractor or ("deny-if-restricted" if r.mutating else "-"),
                " ".join(extra) or "-",
                r.handler,
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]


def cmd_check_config(args) -> int:
    from .registry import load_group_map, load_token_registry

    config = load_config(_config_path(args))
    registry = load_token_registry(config.token_registry_path)
    groups = load_group_map(config.group_map_path) if config.group_map_path else None

    unknown = {r.handler for r in config.route_table} - BUILTIN_HANDLERS
    if unknown:
        raise ConfigError(f"routes name unknown handler(s): {', '.join(sorted(unknown))}")
    cached_mutating = [r for r in config.route_table if r.mutating and r.cache_policy]
    if cached_mutating:
        raise ConfigError("mutating routes must not be cached")

    print(f"config: {args.config or os.environ.get(CONFIG_ENV_VAR)}")
    print("policies: " + ", ".join(
        f"{p.name}=[{p.min_seconds:g},{p.max_seconds:g}]+{p.buffer_seconds:g}" for p in config.policies.values()
    ))
    print(f"fallback_ttl: {config.fallback_ttl:g}s  cache_capacity: {config.cache_capacity}")
    print(f"tokens: {len(registry)} active")
    for rec in sorted(registry, key=lambda r: r.label):
        restr = ",".join(rec.account_patterns) or "unrestricted"
        print(f"  {rec.label}: user={rec.username} scopes={','.join(sorted(rec.scopes))} accounts={restr}")
    if groups is not None:
        print(f"group map: {len(groups)} users")
    print(f"routes: {len(config.route_table)}")
    for line in route_matrix(config):
        print("  " + line)
    print("audit: no mutating route is cacheable")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .app import create_app
    from .gateway import Gateway

    config = load_config(_config_path(args))
    host, port = config.listen_host_port
    if args.listen:
        host, _, p = args.listen.rpartition(":")
        port = int(p)
    app = create_app(Gateway(config))
    uvicorn.run(
        app,
        host=host,
        port=port,
        log_level=args.log_level.lower(),
        server_header=False,
        date_header=False,
        timeout_graceful_shutdown=int(config.shutdown_grace_seconds) or None,
    )
    return 0


def cmd_health(args) -> int:
    import httpx

    headers = {}
    token = args.token or os.environ.get("SCHED_GATE_TOKEN")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url = args.url.rstrip("/") + ("/health/deep" if args.deep else "/health")
    try:
        resp = httpx.get(url, headers=headers, timeout=args.timeout)
    except httpx.HTTPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        print(json.dumps(resp.json(), indent=2, sort_keys=True))
    except ValueError:
        print(resp.text)
    return 0 if resp.status_code == 200 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schedgate", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the gateway")
    p.add_argument("--config", help=f"config file (default: ${CONFIG_ENV_VAR})")
    p.add_argument("--listen", help="override listen_address (host:port)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("mint-token", help="mint a bearer value and print a registry stanza")
    p.add_argument("--user", required=True)
    p.add_argument("--validity", required=True, type=int, help="seconds")
    p.add_argument("--scope", action="append", help="repeatable")
    p.add_argument("--account", action="append", help="account regex, repeatable")
    p.add_argument("--label", help="registry table name (default: user)")
    p.set_defaults(func=cmd_mint_token)

    p = sub.add_parser("check-config", help="validate config, registry and routes; print the route matrix")
    p.add_argument("--config", help=f"config file (default: ${CONFIG_ENV_VAR})")
    p.set_defaults(func=cmd_check_config)

    p = sub.add_parser("health", help="query a running gateway")
    p.add_argument("--url", default="http://127.0.0.1:8080")
    p.add_argument("--deep", action="store_true")
    p.add_argument("--token", help="bearer value (default: $SCHED_GATE_TOKEN)")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_health)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
