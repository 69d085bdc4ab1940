"""Response bodies the gateway itself generates."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class ErrorDetail(BaseModel):
    error: str
    reason: str
    status: int
    source: str = "gateway"


class ErrorBody(BaseModel):
    """Mirrors the upstream envelope so existing clients can read gateway errors."""

    errors: list[ErrorDetail]
    warnings: list[Any] = Field(default_factory=list)
    meta: dict[str, Any] = Field(default_factory=dict)


class ComponentStatus(BaseModel):
    ok: bool
    detail: str = ""
    data: dict[str, Any] = Field(default_factory=dict)


class HealthReport(BaseModel):
    status: str
    components: dict[str, ComponentStatus] = Field(default_factory=dict)
    counters: Optional[dict[str, int]] = None
