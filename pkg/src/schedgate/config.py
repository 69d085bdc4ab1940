"""Service configuration: cache policies, route table, and file loading."""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any, Optional

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveFloat,
    ValidationError,
    field_validator,
    model_validator,
)

from .routes import BUILTIN_ROUTES, DEFAULT_ROUTES, RouteRule, duplicate_routes
from .scopes import DEFAULT_MUNGE_SCOPES, unknown_scopes

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_ENV_VAR = "SCHED_GATE_CONFIG"
DEFAULT_FALLBACK_TTL = 259200.0  # 3 days
DEFAULT_ENV_ALLOWLIST = ("PATH", "LANG", "TZ", "SLURM_CONF")


class ConfigError(Exception):
    """Configuration could not be parsed or violates an invariant."""


class CachePolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    min_seconds: PositiveFloat
    max_seconds: PositiveFloat
    buffer_seconds: float = Field(ge=1, le=5)

    @model_validator(mode="after")
    def _bounds(self) -> "CachePolicy":
        if self.min_seconds > self.max_seconds:
            raise ValueError(
                f"policy {self.name!r}: min_seconds {self.min_seconds} > max_seconds {self.max_seconds}"
            )
        return self


DEFAULT_POLICIES: dict[str, CachePolicy] = {
    "short": CachePolicy(name="short", min_seconds=1, max_seconds=10, buffer_seconds=1),
    "normal": CachePolicy(name="normal", min_seconds=10, max_seconds=30, buffer_seconds=3),
    "long": CachePolicy(name="long", min_seconds=30, max_seconds=60, buffer_seconds=5),
}


class ServiceConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    listen_address: str = "127.0.0.1:8080"
    upstream_command: tuple[str, ...]
    upstream_timeout: PositiveFloat = 30.0
    upstream_concurrency: int = Field(default=64, ge=1)
    upstream_host: str = "localhost"
    upstream_env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    upstream_env: dict[str, str] = Field(default_factory=dict)
    token_mint_command: tuple[str, ...]
    token_mint_timeout: PositiveFloat = 10.0
    token_default_lifetime: PositiveFloat = 600.0
    token_registry_path: Path
    registry_reload_interval: float = Field(default=5.0, ge=1, le=60)
    group_map_path: Optional[Path] = None
    cache_capacity: int = Field(default=10000, ge=1)
    fallback_ttl: PositiveFloat = DEFAULT_FALLBACK_TTL
    per_user_cache: bool = False
    policies: dict[str, CachePolicy] = Field(default_factory=lambda: dict(DEFAULT_POLICIES))
    route_table: tuple[RouteRule, ...] = Field(alias="routes")
    dev_credential_key: Optional[bytes] = None
    munge_default_scopes: frozenset[str] = DEFAULT_MUNGE_SCOPES
    shutdown_grace_seconds: float = Field(default=10.0, ge=0)

    @field_validator("upstream_command", "token_mint_command")
    @classmethod
    def _argv(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        if not v:
            raise ValueError("command must be a non-empty argv list")
        return v

    @field_validator("dev_credential_key", mode="before")
    @classmethod
    def _key(cls, v: Any) -> Any:
        if isinstance(v, str):
            v = v.encode()
        if v is not None and not v:
            raise ValueError("dev_credential_key must be non-empty")
        return v

    @field_validator("munge_default_scopes")
    @classmethod
    def _munge_scopes(cls, v: frozenset[str]) -> frozenset[str]:
        bad = unknown_scopes(v)
        if bad:
            raise ValueError(f"unknown scope(s): {', '.join(bad)}")
        return v

    @model_validator(mode="after")
    def _invariants(self) -> "ServiceConfig":
        for name, policy in self.policies.items():
            if policy.name != name:
                raise ValueError(f"policy key {name!r} does not match its name {policy.name!r}")
        longest = max((p.max_seconds for p in self.policies.values()), default=0.0)
        if self.fallback_ttl < longest:
            raise ValueError(
                f"fallback_ttl ({self.fallback_ttl:g}) must be >= the longest policy max_seconds ({longest:g})"
            )
        dups = duplicate_routes(self.route_table)
        if dups:
            shown = ", ".join(f"({m}, {p})" for m, p in dups)
            raise ValueError(f"duplicate route(s): {shown}")
        for rule in self.route_table:
            if rule.cache_policy is not None and rule.cache_policy not in self.policies:
                raise ValueError(f"route ({rule.method}, {rule.path}) names unknown cache policy {rule.cache_policy!r}")
        return self

    @property
    def listen_host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        return host.strip("[]") or "127.0.0.1", int(port)


def _format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def _with_builtin_routes(routes: list[dict]) -> list[dict]:
    declared = {(r.get("method", "").upper(), r.get("path")) for r in routes}
    missing = [r for r in BUILTIN_ROUTES if (r["method"], r["path"]) not in declared]
    return missing + routes


def config_from_dict(raw: dict[str, Any], base_dir: Path = Path(".")) -> ServiceConfig:
    """Validate a parsed config document; relative paths resolve against ``base_dir``."""
    data = dict(raw)
    for key in ("token_registry_path", "group_map_path"):
        if key in data:
            data[key] = _resolve(base_dir, data[key])
    for key in ("upstream_command", "token_mint_command"):
        if isinstance(data.get(key), str):
            raise ConfigError(f"{key}: must be an argv array, not a shell string")

    if "policies" in data:
        policies = dict(DEFAULT_POLICIES)
        for name, spec in data["policies"].items():
            if not isinstance(spec, dict):
                raise ConfigError(f"policies.{name}: expected a table")
            policies[name] = {"name": name, **spec}
        data["policies"] = policies

    if "routes" in data:
        data["routes"] = _with_builtin_routes(list(data["routes"]))
    else:
        data["routes"] = DEFAULT_ROUTES

    try:
        return ServiceConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from None


def load_config(path: os.PathLike | str) -> ServiceConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror or e}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: parse error: {e}") from None
    try:
        return config_from_dict(raw, base_dir=path.parent)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
