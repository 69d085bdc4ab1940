"""Bearer-token registry and group map files, with mtime-polling reload."""

from __future__ import annotations

import asyncio
import hashlib
import hmac
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import AsyncIterator, Callable, Generic, Mapping, Optional, TypeVar

from .config import ConfigError, tomllib
from .scopes import unknown_scopes

logger = logging.getLogger(__name__)

T = TypeVar("T")


class RegistryError(ConfigError):
    """The token registry or group map file is invalid; nothing from it is accepted."""


@dataclass(frozen=True)
class TokenRecord:
    bearer_value: str = field(repr=False)
    username: str
    scopes: frozenset[str]
    account_patterns: tuple[str, ...] = ()
    description: str = ""
    disabled: bool = False
    label: str = ""

    @property
    def compiled_patterns(self) -> tuple[re.Pattern, ...]:
        return tuple(re.compile(p) for p in self.account_patterns)


def _digest(value: str) -> bytes:
    return hashlib.sha256(value.encode("utf-8")).digest()


class Registry:
    """Immutable snapshot of the active (non-disabled) token records.

    Lookups index by SHA-256 of the bearer value so the table probe leaks
    nothing about the presented string; the final equality check is
    constant-time.
    """

    def __init__(self, records: Mapping[str, TokenRecord] | list[TokenRecord] = ()) -> None:
        if isinstance(records, Mapping):
            records = list(records.values())
        self._by_digest = {_digest(r.bearer_value): r for r in records if not r.disabled}
        self.loaded_at = time.time()

    def __len__(self) -> int:
        return len(self._by_digest)

    def __iter__(self):
        return iter(self._by_digest.values())

    def lookup(self, value: str) -> Optional[TokenRecord]:
        if not value:
            return None
        record = self._by_digest.get(_digest(value))
        if record is None or record.disabled:
            return None
        if not hmac.compare_digest(record.bearer_value.encode(), value.encode()):
            return None
        return record


def _str_list(value, where: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise RegistryError(f"{where}: expected an array of strings")
    return value


def parse_token_registry(text: str, source: str = "<registry>") -> list[TokenRecord]:
    """Parse every record (disabled ones included); any invalid record rejects the file."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise RegistryError(f"{source}: parse error: {e}") from None
    extra = set(doc) - {"tokens"}
    if extra:
        raise RegistryError(f"{source}: unexpected top-level key(s): {', '.join(sorted(extra))}")
    tables = doc.get("tokens", {})
    if not isinstance(tables, dict):
        raise RegistryError(f"{source}: 'tokens' must be a table of tables")

    records = []
    seen: dict[str, str] = {}
    for label, entry in tables.items():
        where = f"{source}: tokens.{label}"
        if not isinstance(entry, dict):
            raise RegistryError(f"{where}: expected a table")
        unknown = set(entry) - {"token", "username", "scopes", "accounts", "description", "disabled"}
        if unknown:
            raise RegistryError(f"{where}: unknown key(s): {', '.join(sorted(unknown))}")
        token = entry.get("token")
        username = entry.get("username")
        if not isinstance(token, str) or not token:
            raise RegistryError(f"{where}.token: required non-empty string")
        if not isinstance(username, str) or not username:
            raise RegistryError(f"{where}.username: required non-empty string")
        scopes = _str_list(entry.get("scopes", []), f"{where}.scopes")
        bad = unknown_scopes(scopes)
        if bad:
            raise RegistryError(f"{where}.scopes: unknown scope(s): {', '.join(bad)}")
        accounts = _str_list(entry.get("accounts", []), f"{where}.accounts")
        for pattern in accounts:
            try:
                re.compile(pattern)
            except re.error as e:
                raise RegistryError(f"{where}.accounts: invalid pattern {pattern!r}: {e}") from None
        disabled = entry.get("disabled", False)
        if not isinstance(disabled, bool):
            raise RegistryError(f"{where}.disabled: expected a boolean")
        description = entry.get("description", "")
        if not isinstance(description, str):
            raise RegistryError(f"{where}.description: expected a string")
        if token in seen:
            raise RegistryError(f"{where}.token: duplicate bearer value (also in tokens.{seen[token]})")
        seen[token] = label
        records.append(
            TokenRecord(
                bearer_value=token,
                username=username,
                scopes=frozenset(scopes),
                account_patterns=tuple(accounts),
                description=description,
                disabled=disabled,
                label=label,
            )
        )
    return records


def load_token_registry(path: os.PathLike | str) -> Registry:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise RegistryError(f"{path}: cannot read registry: {e.strerror or e}") from None
    return Registry(parse_token_registry(text, str(path)))


class GroupMap:
    def __init__(self, groups: Mapping[str, frozenset[str]] | None = None) -> None:
        self._groups = dict(groups or {})
        self.loaded_at = time.time()

    def groups_of(self, username: str) -> frozenset[str]:
        return self._groups.get(username, frozenset())

    def __contains__(self, username: str) -> bool:
        return username in self._groups

    def __len__(self) -> int:
        return len(self._groups)


def parse_group_map(text: str, source: str = "<groups>") -> GroupMap:
    """Lines of ``username: group1,group2``; blank lines and ``#`` comments ignored."""
    groups: dict[str, frozenset[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        user, sep, rest = line.partition(":")
        user = user.strip()
        if not sep or not user:
            raise RegistryError(f"{source}:{lineno}: expected 'username: group1,group2'")
        names = frozenset(g.strip() for g in rest.split(",") if g.strip())
        groups[user] = groups.get(user, frozenset()) | names
    return GroupMap(groups)


def load_group_map(path: os.PathLike | str) -> GroupMap:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise RegistryError(f"{path}: cannot read group map: {e.strerror or e}") from None
    return parse_group_map(text, str(path))


class FileWatcher(Generic[T]):
    """Holds the current snapshot of a file and reloads it when its stat changes.

    ``current`` is replaced by a single assignment, so readers always see one
    complete snapshot. A failed reload keeps the previous snapshot.
    """

    def __init__(self, path: os.PathLike | str, loader: Callable[[Path], T], interval: float = 5.0) -> None:
        self.path = Path(path)
        self.loader = loader
        self.interval = interval
        self.parse_count = 0
        self.reload_failures = 0
        self.last_error: Optional[str] = None
        self._stamp = self._stat()
        self.current: T = self._load()

    def _stat(self):
        try:
            st = os.stat(self.path)
        except OSError:
            return None
        return (st.st_mtime_ns, st.st_size, st.st_ino)

    def _load(self) -> T:
        self.parse_count += 1
        return self.loader(self.path)

    def check(self) -> bool:
        """Reload if the file changed since the last attempt; True if a new snapshot was installed."""
        stamp = self._stat()
        if stamp == self._stamp:
            return False
        self._stamp = stamp
        try:
            snapshot = self._load()
        except ConfigError as e:
            self.reload_failures += 1
            self.last_error = str(e)
            logger.error("reload of %s failed, keeping previous snapshot: %s", self.path, e)
            return False
        self.current = snapshot
        self.last_error = None
        logger.info("reloaded %s", self.path)
        return True

    async def watch(self) -> AsyncIterator[T]:
        """Yield each newly installed snapshot, polling every ``interval`` seconds."""
        while True:
            await asyncio.sleep(self.interval)
            if self.check():
                yield self.current

    async def run(self) -> None:
        async for _ in self.watch():
            pass
