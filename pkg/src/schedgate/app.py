"""FastAPI application wrapping the gateway pipeline."""

from __future__ import annotations

import os
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import Response

from .config import CONFIG_ENV_VAR, load_config
from .gateway import Gateway, GatewayRequest

ALL_METHODS = ["GET", "HEAD", "POST", "PUT", "PATCH", "DELETE", "OPTIONS"]


def to_gateway_request(request: Request, body: bytes) -> GatewayRequest:
    scope = request.scope
    raw_path = scope.get("raw_path")
    path = raw_path.decode("latin-1") if raw_path else scope["path"]
    client = request.client
    return GatewayRequest(
        method=request.method,
        path=path,
        query=scope.get("query_string", b"").decode("latin-1"),
        headers=tuple((k.decode("latin-1"), v.decode("latin-1")) for k, v in scope["headers"]),
        body=body,
        source_address=client.host if client else None,
        http_version=scope.get("http_version", "1.1"),
    )


def create_app(gateway: Gateway, *, manage_lifecycle: bool = True) -> FastAPI:
    """Every path goes through ``gateway.handle``; FastAPI only frames HTTP.

    With ``manage_lifecycle`` the gateway's background tasks start and stop
    with the ASGI lifespan.
    """

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if manage_lifecycle:
            await gateway.start()
        try:
            yield
        finally:
            if manage_lifecycle:
                await gateway.stop()

    app = FastAPI(
        title="schedgate",
        docs_url=None,
        redoc_url=None,
        openapi_url=None,
        lifespan=lifespan,
    )
    app.state.gateway = gateway

    @app.api_route("/{path:path}", methods=ALL_METHODS, include_in_schema=False)
    async def proxy(request: Request, path: str) -> Response:
        body = await request.body()
        resp = await gateway.handle(to_gateway_request(request, body))
        out = Response(content=resp.body, status_code=resp.status)
        # Replace Starlette's defaults so headers pass through exactly.
        out.raw_headers = [(k.lower().encode("latin-1"), v.encode("latin-1")) for k, v in resp.headers]
        if not any(k.lower() == "content-length" for k, _ in resp.headers):
            out.raw_headers.append((b"content-length", str(len(resp.body)).encode()))
        return out

    return app


def app_from_config(path: Optional[str] = None) -> FastAPI:
    """Uvicorn factory entry: ``uvicorn --factory schedgate.app:app_from_config``."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        raise RuntimeError(f"no config path given and {CONFIG_ENV_VAR} is unset")
    return create_app(Gateway(load_config(path)))
