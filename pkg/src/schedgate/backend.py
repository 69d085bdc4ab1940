"""Cache storage backends.

The in-memory backend is an exact LFU: every get hit and every put bumps a
key's frequency; under capacity pressure the lowest-frequency key goes
first, and among equal frequencies the key that reached that frequency
earliest goes first. Each key also carries an absolute expiry set at write
time, after which it is gone regardless of use.
"""

from __future__ import annotations

import heapq
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Protocol


@dataclass(frozen=True)
class CacheEntry:
    generated_at: float
    stale_at: float
    status: int
    headers: tuple[tuple[str, str], ...]
    body: bytes

    def __post_init__(self) -> None:
        if not self.stale_at > self.generated_at:
            raise ValueError("stale_at must be after generated_at")


class CacheBackend(Protocol):
    def get(self, key: str, now: float) -> Optional[CacheEntry]: ...

    def put(self, key: str, entry: CacheEntry, ttl: float, now: float) -> None: ...

    def ping(self) -> bool: ...


class MemoryBackend:
    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.evictions = 0
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self._expires: dict[str, float] = {}
        self._freq: dict[str, int] = {}
        self._buckets: dict[int, OrderedDict[str, None]] = {}
        self._min_freq = 0
        self._expiry_heap: list[tuple[float, str]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def frequency(self, key: str) -> int:
        return self._freq.get(key, 0)

    def ping(self) -> bool:
        return True

    def _bump(self, key: str) -> None:
        f = self._freq[key]
        bucket = self._buckets[f]
        del bucket[key]
        if not bucket:
            del self._buckets[f]
            if self._min_freq == f:
                self._min_freq = f + 1
        self._freq[key] = f + 1
        self._buckets.setdefault(f + 1, OrderedDict())[key] = None

    def _remove(self, key: str) -> None:
        f = self._freq.pop(key)
        bucket = self._buckets[f]
        del bucket[key]
        if not bucket:
            del self._buckets[f]
            if self._min_freq == f:
                self._min_freq = min(self._buckets, default=0)
        del self._entries[key]
        del self._expires[key]

    def _purge_expired(self, now: float) -> None:
        heap = self._expiry_heap
        while heap and heap[0][0] <= now:
            at, key = heapq.heappop(heap)
            if self._expires.get(key) == at:
                self._remove(key)

    def _evict_one(self) -> None:
        bucket = self._buckets[self._min_freq]
        victim = next(iter(bucket))
        self._remove(victim)
        self.evictions += 1

    def get(self, key: str, now: float) -> Optional[CacheEntry]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            if self._expires[key] <= now:
                self._remove(key)
                return None
            self._bump(key)
            return entry

    def put(self, key: str, entry: CacheEntry, ttl: float, now: float) -> None:
        with self._lock:
            expires = now + ttl
            if key in self._entries:
                self._entries[key] = entry
                self._expires[key] = expires
                self._bump(key)
            else:
                if len(self._entries) >= self.capacity:
                    self._purge_expired(now)
                while len(self._entries) >= self.capacity:
                    self._evict_one()
                self._entries[key] = entry
                self._expires[key] = expires
                self._freq[key] = 1
                self._buckets.setdefault(1, OrderedDict())[key] = None
                self._min_freq = 1
            heapq.heappush(self._expiry_heap, (expires, key))
            if len(self._expiry_heap) > 4 * self.capacity + 64:
                self._expiry_heap = [(at, k) for k, at in self._expires.items()]
                heapq.heapify(self._expiry_heap)


# External key-value store contract: one hash per key, fields below, with a
# key-level expiry of the fallback TTL.
HASH_FIELDS = ("generated", "stale", "status", "headers", "body")


def entry_to_hash(entry: CacheEntry) -> dict[str, bytes]:
    return {
        "generated": repr(entry.generated_at).encode(),
        "stale": repr(entry.stale_at).encode(),
        "status": str(entry.status).encode(),
        "headers": json.dumps([list(h) for h in entry.headers]).encode(),
        "body": entry.body,
    }


def entry_from_hash(fields: dict) -> CacheEntry:
    def raw(name):
        v = fields[name] if name in fields else fields[name.encode()]
        return v if isinstance(v, bytes) else str(v).encode()

    return CacheEntry(
        generated_at=float(raw("generated")),
        stale_at=float(raw("stale")),
        status=int(raw("status")),
        headers=tuple((k, v) for k, v in json.loads(raw("headers"))),
        body=raw("body"),
    )


class KeyValueStoreBackend:
    """Adapter for a Redis-like client exposing ``hset``, ``hgetall``,
    ``expire`` and ``ping``. Eviction is left to the store's own policy."""

    def __init__(self, client, prefix: str = "schedgate:") -> None:
        self.client = client
        self.prefix = prefix

    def get(self, key: str, now: float) -> Optional[CacheEntry]:
        fields = self.client.hgetall(self.prefix + key)
        if not fields:
            return None
        return entry_from_hash(fields)

    def put(self, key: str, entry: CacheEntry, ttl: float, now: float) -> None:
        name = self.prefix + key
        self.client.hset(name, mapping=entry_to_hash(entry))
        self.client.expire(name, max(1, int(ttl)))

    def ping(self) -> bool:
        try:
            return bool(self.client.ping())
        except Exception:
            return False
