"""Per-route requirements: scopes, account restrictions, groups, source networks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional
from urllib.parse import parse_qsl, unquote, urlsplit

from .auth import Identity, parse_address
from .registry import GroupMap
from .routes import READ_METHODS, RouteRule, split_path

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Decision:
    allow: bool
    requirement: str = ""
    detail: str = ""
    status: int = 200

    @classmethod
    def ok(cls, requirement: str = "") -> "Decision":
        return cls(True, requirement)

    @classmethod
    def deny(cls, requirement: str, detail: str = "", status: int = 403) -> "Decision":
        return cls(False, requirement, detail, status)


@dataclass(frozen=True)
class AccountExtraction:
    accounts: frozenset[str]
    extractor_id: str
    complete: bool


def check_scope(identity: Optional[Identity], required: Iterable[str]) -> Decision:
    required = frozenset(required)
    if not required:
        return Decision.ok("scope")
    if identity is None:
        return Decision.deny("scope", "authentication required", status=401)
    if identity.scopes & required:
        return Decision.ok("scope")
    return Decision.deny("scope", "missing scope: one of " + ", ".join(sorted(required)))


# -- account extraction -----------------------------------------------------


class _Incomplete(Exception):
    pass


def _reject_duplicates(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise _Incomplete(f"duplicate key {k!r}")
        d[k] = v
    return d


def _load(body: bytes) -> dict:
    try:
        doc = json.loads(body, object_pairs_hook=_reject_duplicates)
    except (ValueError, UnicodeDecodeError) as e:
        raise _Incomplete(f"unparseable body: {e}") from None
    if not isinstance(doc, dict):
        raise _Incomplete("body is not a JSON object")
    return doc


def _obj(value: Any, where: str) -> Optional[dict]:
    if value is None:
        return None
    if not isinstance(value, dict):
        raise _Incomplete(f"{where} is not an object")
    return value


def _objs(value: Any, where: str) -> list[dict]:
    if value is None:
        return []
    if not isinstance(value, list):
        raise _Incomplete(f"{where} is not an array")
    return [o for i, item in enumerate(value) if (o := _obj(item, f"{where}[{i}]")) is not None]


def _name(value: Any, where: str) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise _Incomplete(f"{where} is not a string")
    return value


def _names(value: Any, where: str) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v for v in value.split(",") if v]
    if not isinstance(value, list):
        raise _Incomplete(f"{where} is not an array")
    return [n for i, v in enumerate(value) if (n := _name(v, f"{where}[{i}]"))]


def _job_submit(doc: dict, path: str) -> list[str]:
    found = []
    job = _obj(doc.get("job"), "job")
    if job is not None:
        found.append(_name(job.get("account"), "job.account"))
    for i, j in enumerate(_objs(doc.get("jobs"), "jobs")):
        found.append(_name(j.get("account"), f"jobs[{i}].account"))
    return found


def _job_update(doc: dict, path: str) -> list[str]:
    return [_name(doc.get("account"), "account")] + _job_submit(doc, path)


def _account_manage(doc: dict, path: str) -> list[str]:
    return [_name(a.get("name"), f"accounts[{i}].name") for i, a in enumerate(_objs(doc.get("accounts"), "accounts"))]


def _association_condition(doc: dict, path: str) -> list[str]:
    cond = _obj(doc.get("association_condition"), "association_condition")
    if cond is None:
        return []
    return _names(cond.get("accounts"), "association_condition.accounts")


def _association_manage(doc: dict, path: str) -> list[str]:
    return [
        _name(a.get("account"), f"associations[{i}].account")
        for i, a in enumerate(_objs(doc.get("associations"), "associations"))
    ]


def _user_manage(doc: dict, path: str) -> list[str]:
    found = []
    for i, user in enumerate(_objs(doc.get("users"), "users")):
        for j, assoc in enumerate(_objs(user.get("associations"), f"users[{i}].associations")):
            found.append(_name(assoc.get("account"), f"users[{i}].associations[{j}].account"))
        default = _obj(user.get("default"), f"users[{i}].default")
        if default is not None:
            found.append(_name(default.get("account"), f"users[{i}].default.account"))
    return found


def _account_path(path: str) -> list[str]:
    parts = split_path(urlsplit(path).path)
    if len(parts) < 2 or parts[-2] != "account":
        raise _Incomplete("no account segment in path")
    return [unquote(parts[-1])]


def _association_query(path: str) -> list[str]:
    # Without an account filter the upstream deletes across every account.
    values = [v for k, v in parse_qsl(urlsplit(path).query, keep_blank_values=True) if k == "account"]
    names = [n for v in values for n in v.split(",") if n]
    if not names:
        raise _Incomplete("no account filter in query")
    return names


BODY_EXTRACTORS: dict[str, Callable[[dict, str], list]] = {
    "job-submit": _job_submit,
    "job-update": _job_update,
    "account-manage": _account_manage,
    "accounts-association": _association_condition,
    "association-manage": _association_manage,
    "user-manage": _user_manage,
    "users-association": _association_condition,
}
PATH_EXTRACTORS: dict[str, Callable[[str], list]] = {
    "account-path": _account_path,
    "association-query": _association_query,
}


def extract_accounts(extractor_id: str, method: str, path: str, body: bytes) -> AccountExtraction:
    """Accounts a mutating request touches. Never raises on bad input.

    ``path`` may include the query string.
    """
    try:
        if extractor_id in PATH_EXTRACTORS:
            found = PATH_EXTRACTORS[extractor_id](path)
        elif extractor_id in BODY_EXTRACTORS:
            found = BODY_EXTRACTORS[extractor_id](_load(body), path)
        else:
            raise _Incomplete(f"unknown extractor {extractor_id!r}")
    except _Incomplete as e:
        logger.debug("account extraction %s incomplete: %s", extractor_id, e)
        return AccountExtraction(frozenset(), extractor_id, False)
    except RecursionError:
        return AccountExtraction(frozenset(), extractor_id, False)
    return AccountExtraction(frozenset(a for a in found if a), extractor_id, True)


def check_account_restriction(
    identity: Optional[Identity], method: str, extraction: Optional[AccountExtraction]
) -> Decision:
    if method.upper() in READ_METHODS:
        return Decision.ok("account")
    if identity is None or not identity.account_patterns:
        return Decision.ok("account")
    if extraction is None:
        logger.warning("deny %s: mutating route has no account extractor", identity.username)
        return Decision.deny("account", "account restriction cannot be verified")
    if not extraction.complete:
        logger.warning("deny %s: request body not fully understood (%s)", identity.username, extraction.extractor_id)
        return Decision.deny("account", "account restriction cannot be verified")
    for account in sorted(extraction.accounts):
        if not any(p.fullmatch(account) for p in identity.account_patterns):
            logger.warning("deny %s: account %r outside restriction policy", identity.username, account)
            return Decision.deny("account", "account not permitted")
    return Decision.ok("account")


def check_group(identity: Optional[Identity], allowed_groups: Iterable[str], group_map: GroupMap) -> Decision:
    if identity is None:
        return Decision.deny("group", "authentication required", status=401)
    if group_map.groups_of(identity.username) & frozenset(allowed_groups):
        return Decision.ok("group")
    return Decision.deny("group", "group membership required")


def check_address(source_address, cidrs: Iterable) -> Decision:
    addr = parse_address(source_address)
    if addr is not None and any(addr.version == net.version and addr in net for net in cidrs):
        return Decision.ok("address")
    return Decision.deny("address", "source address not permitted")


def authorize(
    route: RouteRule,
    identity: Optional[Identity],
    method: str,
    path: str,
    body: bytes,
    group_map: GroupMap,
    source_address,
    on_account_check: Optional[Callable[[], None]] = None,
) -> Decision:
    """Evaluate route requirements in order scope, account, group, address; first deny wins."""
    decision = check_scope(identity, route.scopes)
    if not decision.allow:
        return decision
    if method.upper() not in READ_METHODS:
        if on_account_check is not None:
            on_account_check()
        extraction = None
        if route.account_extractor is not None:
            extraction = extract_accounts(route.account_extractor, method, path, body)
        decision = check_account_restriction(identity, method, extraction)
        if not decision.allow:
            return decision
    if route.groups is not None:
        decision = check_group(identity, route.groups, group_map)
        if not decision.allow:
            return decision
    if route.cidrs is not None:
        decision = check_address(source_address, route.cidrs)
        if not decision.allow:
            return decision
    return Decision.ok()
