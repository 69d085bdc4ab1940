import itertools
import json
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schedgate.auth import Identity
from schedgate.authz import (
    AccountExtraction,
    authorize,
    check_account_restriction,
    check_address,
    check_group,
    check_scope,
    extract_accounts,
)
from schedgate.registry import GroupMap, parse_group_map
from schedgate.routes import DEFAULT_ROUTES, RouteRule, build_routes, match_route

ROUTES = build_routes(DEFAULT_ROUTES)
V = "/slurm/v0.0.43"
DB = "/slurmdb/v0.0.43"


def ident(scopes=(), patterns=(), user="alice"):
    return Identity(user, frozenset(scopes), "bearer", None, tuple(re.compile(p) for p in patterns))


def nets(*cidrs):
    import ipaddress

    return [ipaddress.ip_network(c) for c in cidrs]


# -- scopes ------------------------------------------------------------------


def test_scope_allows_matching_read():
    assert check_scope(ident(["slurm:read"]), {"slurm:read"}).allow


def test_scope_missing_is_403():
    d = check_scope(ident(["slurm:read"]), {"slurm:jobs:manage"})
    assert (d.allow, d.status) == (False, 403)


def test_public_route_allows_unauthenticated():
    assert check_scope(None, set()).allow


def test_unauthenticated_on_protected_route_is_401():
    d = check_scope(None, {"slurm:read"})
    assert (d.allow, d.status) == (False, 401)


def test_scope_any_of():
    assert check_scope(ident(["b"]), {"a", "b"}).allow


# -- extraction --------------------------------------------------------------


def test_job_submit_extraction():
    body = json.dumps({"job": {"account": "rcd_test", "script": "#!/bin/sh\ntrue"}}).encode()
    ex = extract_accounts("job-submit", "POST", f"{V}/job/submit", body)
    assert ex == AccountExtraction(frozenset({"rcd_test"}), "job-submit", True)


def test_job_submit_array_and_single():
    body = json.dumps({"job": {"account": "a1"}, "jobs": [{"account": "a2"}, {"name": "x"}]}).encode()
    assert extract_accounts("job-submit", "POST", f"{V}/job/submit", body).accounts == {"a1", "a2"}


def test_delete_by_path_extraction():
    ex = extract_accounts("account-path", "DELETE", f"{DB}/account/physics", b"")
    assert (ex.accounts, ex.complete) == (frozenset({"physics"}), True)


def test_malformed_body_extraction():
    ex = extract_accounts("job-submit", "POST", f"{V}/job/submit", b"{not json")
    assert (ex.accounts, ex.complete) == (frozenset(), False)


def test_missing_account_field_is_complete_and_empty():
    ex = extract_accounts("job-submit", "POST", f"{V}/job/submit", b'{"job": {"name": "x"}}')
    assert (ex.accounts, ex.complete) == (frozenset(), True)


@pytest.mark.parametrize(
    "extractor, body, expected",
    [
        ("account-manage", {"accounts": [{"name": "rcd_a"}, {"name": "rcd_b", "description": "d"}]}, {"rcd_a", "rcd_b"}),
        ("association-manage", {"associations": [{"account": "x", "user": "u"}]}, {"x"}),
        (
            "user-manage",
            {"users": [{"name": "u", "associations": [{"account": "p"}], "default": {"account": "q"}}]},
            {"p", "q"},
        ),
        ("accounts-association", {"association_condition": {"accounts": ["a", "b"]}, "account": {}}, {"a", "b"}),
        ("users-association", {"association_condition": {"accounts": ["c"], "users": ["u"]}}, {"c"}),
        ("job-update", {"account": "top", "job": {"account": "inner"}}, {"top", "inner"}),
    ],
)
def test_body_extractors(extractor, body, expected):
    ex = extract_accounts(extractor, "POST", "/x", json.dumps(body).encode())
    assert ex.complete and ex.accounts == expected


@pytest.mark.parametrize(
    "extractor, body",
    [
        ("job-submit", {"job": {"account": 5}}),
        ("job-submit", {"job": "rcd"}),
        ("job-submit", {"jobs": {"account": "rcd"}}),
        ("account-manage", {"accounts": [{"name": ["rcd"]}]}),
        ("account-manage", {"accounts": "rcd"}),
        ("user-manage", {"users": [{"associations": [1]}]}),
        ("job-submit", []),
        ("job-submit", "rcd"),
    ],
)
def test_unrecognized_structure_is_incomplete(extractor, body):
    assert not extract_accounts(extractor, "POST", "/x", json.dumps(body).encode()).complete


def test_duplicate_json_keys_are_incomplete():
    body = b'{"job": {"account": "rcd_ok", "account": "physics"}}'
    assert not extract_accounts("job-submit", "POST", "/x", body).complete


def test_association_query_extraction():
    ok = extract_accounts("association-query", "DELETE", f"{DB}/associations?account=rcd_a,rcd_b&user=u", b"")
    assert ok.complete and ok.accounts == {"rcd_a", "rcd_b"}
    unfiltered = extract_accounts("association-query", "DELETE", f"{DB}/associations?user=u", b"")
    assert not unfiltered.complete


def test_empty_body_is_incomplete():
    assert not extract_accounts("job-submit", "POST", "/x", b"").complete


def test_deeply_nested_body_never_crashes():
    body = b"[" * 100000 + b"]" * 100000
    assert not extract_accounts("job-submit", "POST", "/x", body).complete


# -- account restriction -----------------------------------------------------


def _ex(*accounts, complete=True):
    return AccountExtraction(frozenset(accounts), "t", complete)


def test_restriction_allows_matching():
    assert check_account_restriction(ident(patterns=["^rcd.*"]), "POST", _ex("rcd_test")).allow


def test_restriction_denies_non_matching():
    d = check_account_restriction(ident(patterns=["^rcd.*"]), "POST", _ex("physics"))
    assert (d.allow, d.status) == (False, 403)
    assert "physics" not in d.detail


def test_unrestricted_allows_anything():
    assert check_account_restriction(ident(), "POST", _ex("physics", complete=False)).allow


def test_restriction_is_anchored():
    assert not check_account_restriction(ident(patterns=["rcd"]), "POST", _ex("norcd")).allow
    assert not check_account_restriction(ident(patterns=["rcd"]), "POST", _ex("rcd_x")).allow
    assert check_account_restriction(ident(patterns=["rcd"]), "POST", _ex("rcd")).allow


def test_restriction_every_account_must_match():
    assert not check_account_restriction(ident(patterns=["^rcd.*"]), "POST", _ex("rcd_a", "physics")).allow
    assert check_account_restriction(ident(patterns=["^rcd.*", "chem"]), "POST", _ex("rcd_a", "chem")).allow


def test_restriction_empty_complete_allows():
    assert check_account_restriction(ident(patterns=["^rcd.*"]), "POST", _ex()).allow


def test_restriction_without_extractor_denies():
    assert not check_account_restriction(ident(patterns=["^rcd.*"]), "DELETE", None).allow


def test_restriction_skipped_for_reads():
    assert check_account_restriction(ident(patterns=["^rcd.*"]), "GET", _ex("physics", complete=False)).allow


# -- groups and networks -----------------------------------------------------

GROUPS = parse_group_map("alice: hpc-admins\nbob: researchers\n")


def test_group_member_allowed():
    assert check_group(ident(user="alice"), {"hpc-admins"}, GROUPS).allow


def test_group_non_member_denied():
    assert not check_group(ident(user="bob"), {"hpc-admins"}, GROUPS).allow


def test_group_unknown_user_denied():
    assert not check_group(ident(user="zed"), {"hpc-admins"}, GROUPS).allow


@pytest.mark.parametrize(
    "addr, allowed",
    [("10.1.2.3", True), ("192.168.1.1", False), ("10.255.255.255", True), ("11.0.0.0", False), ("::ffff:10.0.0.1", True), (None, False)],
)
def test_address_allowlist(addr, allowed):
    assert check_address(addr, nets("10.0.0.0/8")).allow is allowed


def test_address_ipv6():
    assert check_address("::1", nets("127.0.0.0/8", "::1/128")).allow
    assert not check_address("::2", nets("127.0.0.0/8", "::1/128")).allow


# -- conjunction and ordering ------------------------------------------------


def _combined_route():
    return RouteRule(
        method="POST",
        path="/admin/accounts",
        scopes=frozenset({"slurmdb:accounts:manage"}),
        account_extractor="account-manage",
        groups=frozenset({"hpc-admins"}),
        cidrs=["10.0.0.0/8"],
    )


def _checks(route, identity, body, addr):
    ex = extract_accounts(route.account_extractor, "POST", route.path, body)
    return [
        check_scope(identity, route.scopes),
        check_account_restriction(identity, "POST", ex),
        check_group(identity, route.groups, GROUPS),
        check_address(addr, route.cidrs),
    ]


def test_requirement_order_does_not_change_outcome():
    route = _combined_route()
    bodies = [b'{"accounts":[{"name":"rcd_a"}]}', b'{"accounts":[{"name":"phys"}]}', b"{bad"]
    identities = [
        ident(["slurmdb:accounts:manage"], ["^rcd.*"], "alice"),
        ident(["slurmdb:accounts:manage"], [], "bob"),
        ident(["slurm:read"], [], "alice"),
        ident(["slurmdb:accounts:manage"], [], "alice"),
    ]
    for identity, body, addr in itertools.product(identities, bodies, ["10.0.0.1", "192.168.0.1"]):
        checks = _checks(route, identity, body, addr)
        expected = all(d.allow for d in checks)
        for order in itertools.permutations(checks):
            assert all(d.allow for d in order) == expected
        assert authorize(route, identity, "POST", route.path, body, GROUPS, addr).allow == expected


def test_read_methods_never_invoke_account_check():
    calls = []
    restricted = ident(["slurm:read", "slurmdb:read", "slurmdb:config:read"], ["^rcd.*"])
    for route in ROUTES:
        if route.method != "GET":
            continue
        path = route.path.replace("**", "x").replace("*", "v0.0.43")
        authorize(route, restricted, "GET", path, b"{bad", GroupMap(), "10.0.0.1", on_account_check=lambda: calls.append(1))
    assert calls == []


def test_mutating_routes_invoke_account_check():
    calls = []
    route = match_route(ROUTES, "POST", f"{V}/job/submit")
    authorize(route, ident(["slurm:jobs:manage"]), "POST", f"{V}/job/submit", b"{}", GroupMap(), None, lambda: calls.append(1))
    assert calls == [1]


@settings(max_examples=400, deadline=None)
@given(data=st.data())
def test_incomplete_extraction_always_denies_restricted(data):
    """Mutate valid bodies at random; whenever extraction is incomplete the restricted identity is denied."""
    base = json.dumps({"job": {"account": "rcd_x", "script": "s"}, "jobs": [{"account": "rcd_y"}]})
    raw = bytearray(base.encode())
    for _ in range(data.draw(st.integers(1, 4))):
        op = data.draw(st.sampled_from(["flip", "drop", "insert"]))
        pos = data.draw(st.integers(0, len(raw) - 1))
        if op == "flip":
            raw[pos] = data.draw(st.integers(0, 255))
        elif op == "drop":
            del raw[pos]
        else:
            raw.insert(pos, data.draw(st.sampled_from(list(b'{}[]",:0a'))))
    ex = extract_accounts("job-submit", "POST", f"{V}/job/submit", bytes(raw))
    decision = check_account_restriction(ident(patterns=["^rcd.*"]), "POST", ex)
    if not ex.complete:
        assert not decision.allow


def test_random_structures_never_crash():
    rng = random.Random(3)

    def value(depth):
        kind = rng.randrange(6 if depth < 4 else 3)
        if kind == 0:
            return rng.choice(["rcd", "physics", "", "x" * 5])
        if kind == 1:
            return rng.randrange(-5, 5)
        if kind == 2:
            return None
        if kind == 3:
            return [value(depth + 1) for _ in range(rng.randrange(3))]
        keys = ["job", "jobs", "account", "accounts", "name", "users", "associations", "default", "association_condition"]
        return {rng.choice(keys): value(depth + 1) for _ in range(rng.randrange(4))}

    extractors = ["job-submit", "job-update", "account-manage", "accounts-association", "association-manage", "user-manage"]
    for _ in range(3000):
        body = json.dumps(value(0)).encode()
        for e in extractors:
            ex = extract_accounts(e, "POST", "/x", body)
            assert isinstance(ex.accounts, frozenset)
