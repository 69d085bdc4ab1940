"""HTTP/1.1 wire encoding for single-exchange (inetd-style) transports.

Standard library only; the mock upstream imports this on every spawn.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from http import HTTPStatus
from typing import Iterable, Optional

HTTP_VERSION = "HTTP/1.1"
CRLF = b"\r\n"

_TOKEN_RE = re.compile(r"[!#$%&'*+\-.^_`|~0-9A-Za-z]+")
_STATUS_RE = re.compile(rb"HTTP/1\.[01] ([0-9]{3})(?: ([^\r\n]*))?")
_REQUEST_RE = re.compile(r"([A-Z]+) ([!-~]+) (HTTP/1\.[01])")

Headers = tuple[tuple[str, str], ...]


class WireError(ValueError):
    """Bytes are not a well-formed HTTP/1.1 message."""


def header_value(headers: Iterable[tuple[str, str]], name: str) -> Optional[str]:
    lname = name.lower()
    for k, v in headers:
        if k.lower() == lname:
            return v
    return None


def without_headers(headers: Iterable[tuple[str, str]], *names: str) -> Headers:
    drop = {n.lower() for n in names}
    return tuple((k, v) for k, v in headers if k.lower() not in drop)


@dataclass(frozen=True)
class WireRequest:
    method: str
    target: str
    headers: Headers = ()
    body: bytes = b""

    def header(self, name: str) -> Optional[str]:
        return header_value(self.headers, name)


@dataclass(frozen=True)
class WireResponse:
    status: int
    headers: Headers = ()
    body: bytes = b""
    reason: str = ""

    def header(self, name: str) -> Optional[str]:
        return header_value(self.headers, name)


def _check_header(name: str, value: str) -> None:
    if not _TOKEN_RE.fullmatch(name):
        raise WireError(f"invalid header name {name!r}")
    if any(c in value for c in "\r\n\0"):
        raise WireError(f"invalid characters in header {name!r}")
    try:
        value.encode("latin-1")
    except UnicodeEncodeError:
        raise WireError(f"header {name!r} is not latin-1") from None


def serialize_wire(req: WireRequest) -> bytes:
    """Request line, CRLF-terminated headers, ``Connection: close``, blank line, body."""
    if not _REQUEST_RE.fullmatch(f"{req.method} {req.target} {HTTP_VERSION}"):
        raise WireError(f"invalid request line for {req.method!r} {req.target!r}")
    length = req.header("content-length")
    if length is not None and length != str(len(req.body)):
        raise WireError("Content-Length does not match body length")
    if length is None and req.body:
        raise WireError("body present without Content-Length")
    lines = [f"{req.method} {req.target} {HTTP_VERSION}"]
    for name, value in req.headers:
        _check_header(name, value)
        if name.lower() == "connection":
            continue
        lines.append(f"{name}: {value}")
    lines.append("Connection: close")
    head = "\r\n".join(lines).encode("latin-1") + CRLF + CRLF
    return head + req.body


def _split_head(data: bytes) -> tuple[list[bytes], bytes]:
    end = data.find(CRLF + CRLF)
    if end < 0:
        raise WireError("incomplete message head")
    return data[:end].split(CRLF), data[end + 4 :]


def _parse_headers(lines: list[bytes]) -> Headers:
    headers = []
    for raw in lines:
        if not raw or raw[:1] in (b" ", b"\t"):
            raise WireError("folded or empty header line")
        name, sep, value = raw.partition(b":")
        if not sep:
            raise WireError(f"malformed header line {raw[:40]!r}")
        try:
            name_s = name.decode("ascii")
        except UnicodeDecodeError:
            raise WireError("non-ascii header name") from None
        value_s = value.strip(b" \t").decode("latin-1")
        _check_header(name_s, value_s)
        headers.append((name_s, value_s))
    return tuple(headers)


def _content_length(headers: Headers) -> Optional[int]:
    values = [v for k, v in headers if k.lower() == "content-length"]
    if not values:
        return None
    if len(set(values)) != 1 or not values[0].isdigit():
        raise WireError("invalid Content-Length")
    return int(values[0])


def _dechunk(data: bytes) -> bytes:
    out = bytearray()
    pos = 0
    while True:
        eol = data.find(CRLF, pos)
        if eol < 0:
            raise WireError("truncated chunk size")
        size_text = data[pos:eol].split(b";", 1)[0].strip()
        try:
            size = int(size_text, 16)
        except ValueError:
            raise WireError("invalid chunk size") from None
        pos = eol + 2
        if size == 0:
            # trailers are ignored
            return bytes(out)
        if len(data) < pos + size + 2 or data[pos + size : pos + size + 2] != CRLF:
            raise WireError("truncated chunk")
        out += data[pos : pos + size]
        pos += size + 2


def parse_wire_response(data: bytes) -> WireResponse:
    if not data:
        raise WireError("empty response")
    lines, rest = _split_head(data)
    m = _STATUS_RE.fullmatch(lines[0])
    if not m:
        raise WireError(f"malformed status line {lines[0][:60]!r}")
    status = int(m.group(1))
    reason = (m.group(2) or b"").decode("latin-1")
    headers = _parse_headers(lines[1:])

    encoding = header_value(headers, "transfer-encoding")
    if encoding is not None:
        if encoding.strip().lower() != "chunked":
            raise WireError(f"unsupported Transfer-Encoding {encoding!r}")
        body = _dechunk(rest)
        headers = without_headers(headers, "transfer-encoding", "content-length") + (
            ("Content-Length", str(len(body))),
        )
        return WireResponse(status, headers, body, reason)

    length = _content_length(headers)
    if length is None:
        return WireResponse(status, headers, rest, reason)
    if len(rest) < length:
        raise WireError(f"truncated body: expected {length} bytes, got {len(rest)}")
    if len(rest) > length:
        raise WireError(f"{len(rest) - length} unexpected bytes after body")
    return WireResponse(status, headers, rest, reason)


def parse_wire_request(data: bytes) -> WireRequest:
    """Inverse of serialize_wire; ``Connection`` is consumed, not returned."""
    lines, rest = _split_head(data)
    try:
        line = lines[0].decode("ascii")
    except UnicodeDecodeError:
        raise WireError("non-ascii request line") from None
    m = _REQUEST_RE.fullmatch(line)
    if not m:
        raise WireError(f"malformed request line {line[:60]!r}")
    method, target, _version = m.groups()
    headers = _parse_headers(lines[1:])
    length = _content_length(headers)
    if length is None:
        if rest:
            raise WireError("body present without Content-Length")
        body = b""
    else:
        if len(rest) != length:
            raise WireError(f"body length {len(rest)} does not match Content-Length {length}")
        body = rest
    return WireRequest(method, target, without_headers(headers, "connection"), body)


def serialize_response(resp: WireResponse) -> bytes:
    reason = resp.reason
    if not reason:
        try:
            reason = HTTPStatus(resp.status).phrase
        except ValueError:
            reason = ""
    lines = [f"{HTTP_VERSION} {resp.status} {reason}".rstrip()]
    for name, value in resp.headers:
        _check_header(name, value)
        lines.append(f"{name}: {value}")
    return "\r\n".join(lines).encode("latin-1") + CRLF + CRLF + resp.body
