import base64
import json
import statistics
import time

import jwt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schedgate.auth import (
    AuthError,
    authenticate,
    mint_bearer_token,
    parse_address,
    verify_bearer,
    verify_munge,
)
from schedgate.clock import FakeClock
from schedgate.munge import (
    FIELD_ORDER,
    CredentialError,
    DevHmacDecoder,
    MungeCredential,
    canonical_payload,
    decode_dev_credential,
    encode_dev_credential,
)
from schedgate.registry import Registry, TokenRecord
from schedgate.scopes import DEFAULT_MUNGE_SCOPES

KEY = b"credential-domain-key"
NOW = 1_700_000_000


def _b64d(seg: str) -> bytes:
    return base64.urlsafe_b64decode(seg + "=" * (-len(seg) % 4))


def _cred(**kw) -> MungeCredential:
    base = dict(username="alice", uid=1000, gid=1000, origin="10.0.0.7", encode_time=NOW, ttl=4)
    base.update(kw)
    return MungeCredential(**base)


@pytest.fixture
def registry():
    return Registry(
        [
            TokenRecord("tok-a", "alice", frozenset({"slurm:read"}), ("^rcd.*",), label="a"),
            TokenRecord("tok-b", "bob", frozenset({"slurmdb:read"}), label="b"),
            TokenRecord("tok-off", "carol", frozenset({"slurm:read"}), disabled=True, label="off"),
        ]
    )


# -- bearer minting ----------------------------------------------------------


def test_mint_produces_structural_jwt():
    token = mint_bearer_token("svc-coldfront", NOW, 31536000)
    segments = token.split(".")
    assert len(segments) == 3
    header = json.loads(_b64d(segments[0]))
    assert header["alg"] == "HS256"
    claims = jwt.decode(token, options={"verify_signature": False})
    assert set(claims) == {"sun", "iat", "exp", "rnd"}
    assert claims["sun"] == "svc-coldfront"
    assert claims["iat"] == NOW
    assert claims["exp"] - claims["iat"] == 31536000
    assert len(_b64d(claims["rnd"])) >= 32


def test_two_mints_with_same_arguments_differ():
    assert mint_bearer_token("a", NOW, 60) != mint_bearer_token("a", NOW, 60)


def test_same_claims_different_key_is_a_different_bearer(registry):
    rnd = iter([b"\x01" * 32, b"\x02" * 32, b"\x03" * 32, b"\x02" * 32])
    first = mint_bearer_token("alice", NOW, 60, entropy_source=lambda n: next(rnd))
    second = mint_bearer_token("alice", NOW, 60, entropy_source=lambda n: next(rnd))
    c1 = jwt.decode(first, options={"verify_signature": False})
    c2 = jwt.decode(second, options={"verify_signature": False})
    assert c1 == c2 and first != second
    reg = Registry([TokenRecord(first, "alice", frozenset({"slurm:read"}))])
    assert verify_bearer(first, reg).username == "alice"
    with pytest.raises(AuthError):
        verify_bearer(second, reg)


def test_mint_rejects_bad_arguments():
    with pytest.raises(ValueError):
        mint_bearer_token("a", NOW, 0)
    with pytest.raises(ValueError):
        mint_bearer_token("", NOW, 10)


def test_mint_entropy_failure():
    def broken(n):
        raise OSError("no entropy")

    with pytest.raises(OSError):
        mint_bearer_token("a", NOW, 10, entropy_source=broken)
    with pytest.raises(RuntimeError):
        mint_bearer_token("a", NOW, 10, entropy_source=lambda n: b"short")


# -- bearer verification -----------------------------------------------------


def test_verify_registered_value(registry):
    assert verify_bearer("tok-a", registry).username == "alice"


def test_verify_disabled_value_rejected(registry):
    with pytest.raises(AuthError):
        verify_bearer("tok-off", registry)


def test_verify_empty_value_rejected(registry):
    with pytest.raises(AuthError):
        verify_bearer("", registry)


def test_bearer_comparison_timing_is_position_independent():
    """Best effort: coarse tolerance, medians only."""
    secret = "x" * 64
    reg = Registry([TokenRecord(secret, "u", frozenset())])
    early = "y" + "x" * 63
    late = "x" * 63 + "y"

    def median_ns(value):
        samples = []
        for _ in range(3000):
            t0 = time.perf_counter_ns()
            reg.lookup(value)
            samples.append(time.perf_counter_ns() - t0)
        return statistics.median(samples)

    a, b = median_ns(early), median_ns(late)
    assert max(a, b) / max(1, min(a, b)) < 3.0


# -- provider chain ----------------------------------------------------------


def test_user_token_header_authenticates(registry):
    ident = authenticate({"X-Slurm-User-Token": "tok-a"}, "10.0.0.7", registry, None, FakeClock(NOW))
    assert (ident.username, ident.scopes, ident.auth_method) == ("alice", frozenset({"slurm:read"}), "bearer")
    assert ident.restricted


def test_no_credentials_is_unauthenticated(registry):
    assert authenticate({"Accept": "application/json"}, "10.0.0.7", registry, None, FakeClock(NOW)) is None


def test_invalid_bearer_with_valid_munge_is_rejected(registry):
    dec = DevHmacDecoder(KEY)
    headers = [("Authorization", "MUNGE " + dec.encode(_cred())), ("X-Slurm-User-Token", "wrong")]
    # MUNGE alone is fine
    assert authenticate(headers[:1], "10.0.0.7", registry, dec, FakeClock(NOW)).username == "alice"
    with pytest.raises(AuthError):
        authenticate(headers, "10.0.0.7", registry, dec, FakeClock(NOW))


def test_authorization_bearer_decides_before_user_token(registry):
    ident = authenticate(
        [("Authorization", "Bearer tok-b"), ("X-Slurm-User-Token", "tok-a")], None, registry, None, FakeClock(NOW)
    )
    assert ident.username == "bob"
    with pytest.raises(AuthError):
        authenticate(
            [("Authorization", "Bearer nope"), ("X-Slurm-User-Token", "tok-a")], None, registry, None, FakeClock(NOW)
        )


@pytest.mark.parametrize("value", ["Basic YWxpY2U6cHc=", "Token tok-a", "tok-a", "Bearer", "Bearer "])
def test_unusable_authorization_header_rejected(registry, value):
    with pytest.raises(AuthError):
        authenticate({"Authorization": value}, None, registry, None, FakeClock(NOW))


def test_scheme_is_case_insensitive(registry):
    assert authenticate({"authorization": "bearer tok-b"}, None, registry, None, FakeClock(NOW)).username == "bob"


def test_duplicate_credential_headers_rejected(registry):
    with pytest.raises(AuthError):
        authenticate([("Authorization", "Bearer tok-a"), ("Authorization", "Bearer tok-b")], None, registry, None, FakeClock(NOW))


def test_munge_identity_carries_default_scopes(registry):
    dec = DevHmacDecoder(KEY)
    ident = authenticate({"Authorization": "MUNGE " + dec.encode(_cred())}, "10.0.0.7", registry, dec, FakeClock(NOW))
    assert ident.auth_method == "munge"
    assert ident.scopes == DEFAULT_MUNGE_SCOPES
    assert not ident.restricted


def test_munge_without_decoder_rejected(registry):
    with pytest.raises(AuthError):
        authenticate({"Authorization": "MUNGE abc"}, "10.0.0.7", registry, None, FakeClock(NOW))


# -- MUNGE semantics ---------------------------------------------------------


def test_munge_ttl_five_rejected():
    dec = DevHmacDecoder(KEY)
    with pytest.raises(AuthError, match="ttl"):
        verify_munge(dec.encode(_cred(ttl=5)), "10.0.0.7", dec, FakeClock(NOW))


def test_munge_ttl_four_accepted():
    dec = DevHmacDecoder(KEY)
    assert verify_munge(dec.encode(_cred(ttl=4)), "10.0.0.7", dec, FakeClock(NOW)).username == "alice"


def test_munge_address_mismatch_rejected():
    dec = DevHmacDecoder(KEY)
    with pytest.raises(AuthError, match="address"):
        verify_munge(dec.encode(_cred(origin="10.0.0.7")), "10.0.0.8", dec, FakeClock(NOW))


def test_munge_ipv4_mapped_source_matches():
    dec = DevHmacDecoder(KEY)
    assert verify_munge(dec.encode(_cred()), "::ffff:10.0.0.7", dec, FakeClock(NOW))


def test_munge_expiry_boundary():
    dec = DevHmacDecoder(KEY)
    cred = dec.encode(_cred(encode_time=NOW, ttl=4))
    assert verify_munge(cred, "10.0.0.7", dec, FakeClock(NOW + 4))
    with pytest.raises(AuthError, match="expired"):
        verify_munge(cred, "10.0.0.7", dec, FakeClock(NOW + 4.001))


def test_munge_wrong_domain_rejected():
    with pytest.raises(AuthError, match="mac-mismatch"):
        verify_munge(encode_dev_credential(_cred(), b"other"), "10.0.0.7", DevHmacDecoder(KEY), FakeClock(NOW))


def test_parse_address():
    assert str(parse_address("::ffff:192.0.2.1")) == "192.0.2.1"
    assert parse_address("not-an-ip") is None
    assert parse_address(None) is None


# -- dev credential codec ----------------------------------------------------

creds = st.builds(
    MungeCredential,
    username=st.text(min_size=1, max_size=24),
    uid=st.integers(0, 2**32 - 1),
    gid=st.integers(0, 2**32 - 1),
    origin=st.one_of(st.ip_addresses(v=4), st.ip_addresses(v=6)).map(str),
    encode_time=st.integers(0, 2**40),
    ttl=st.integers(0, 3600),
)


@settings(max_examples=300, deadline=None)
@given(cred=creds, key=st.binary(min_size=1, max_size=64))
def test_codec_round_trip(cred, key):
    assert decode_dev_credential(encode_dev_credential(cred, key), key) == cred


def test_canonical_payload_field_order():
    payload = canonical_payload(_cred())
    assert list(json.loads(payload)) == list(FIELD_ORDER)
    assert payload == b'{"username":"alice","uid":1000,"gid":1000,"origin":"10.0.0.7","encode_time":1700000000,"ttl":4}'


def test_every_single_character_substitution_is_rejected():
    text = encode_dev_credential(_cred(), KEY)
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
    for i, ch in enumerate(text):
        for sub in alphabet:
            if sub == ch:
                continue
            mutated = text[:i] + sub + text[i + 1 :]
            with pytest.raises(CredentialError):
                decode_dev_credential(mutated, KEY)


def test_every_single_bit_flip_of_raw_bytes_is_rejected():
    text = encode_dev_credential(_cred(), KEY)
    raw = _b64d(text)
    for i in range(len(raw)):
        for bit in range(8):
            flipped = bytearray(raw)
            flipped[i] ^= 1 << bit
            mutated = base64.urlsafe_b64encode(bytes(flipped)).rstrip(b"=").decode()
            with pytest.raises(CredentialError, match="mac-mismatch"):
                decode_dev_credential(mutated, KEY)


@pytest.mark.parametrize("text", ["", "!!!!", "abc", "é", "A" * 10])
def test_malformed_credentials(text):
    with pytest.raises(CredentialError, match="malformed"):
        decode_dev_credential(text, KEY)


def test_truncated_or_extended_credential_rejected():
    text = encode_dev_credential(_cred(), KEY)
    for mutated in (text[:-1], text[:-4], text + "A", text + "AAAA"):
        with pytest.raises(CredentialError):
            decode_dev_credential(mutated, KEY)


def test_mac_valid_but_bad_payload_is_malformed():
    import hashlib
    import hmac as _hmac

    payload = b'{"username":"alice","uid":"1000","gid":1,"origin":"10.0.0.7","encode_time":1,"ttl":1}'
    raw = _hmac.new(KEY, payload, hashlib.sha256).digest() + payload
    text = base64.urlsafe_b64encode(raw).rstrip(b"=").decode()
    with pytest.raises(CredentialError, match="malformed"):
        decode_dev_credential(text, KEY)


def test_empty_key_refused():
    with pytest.raises(ValueError):
        DevHmacDecoder(b"")
