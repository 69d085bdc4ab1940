from __future__ import annotations


class GatewayError(Exception):
    """A request failed inside the gateway.

    ``reason`` is a stable machine-readable code placed in the error body.
    ``upstream`` carries the upstream's own response when there was one, so
    its body can be relayed unchanged.
    """

    def __init__(self, status: int, reason: str, message: str = "", upstream=None) -> None:
        super().__init__(message or reason)
        self.status = status
        self.reason = reason
        self.message = message or reason
        self.upstream = upstream

    def __repr__(self) -> str:
        return f"GatewayError({self.status}, {self.reason!r})"


class TokenUnavailable(GatewayError):
    def __init__(self, message: str = "upstream credential unavailable") -> None:
        super().__init__(503, "upstream-token-unavailable", message)

