"""HTTP surface for a Gateway (FastAPI)."""

from __future__ import annotations

from typing import Any

from fastapi import Body, FastAPI, Header, Request
from fastapi.responses import JSONResponse

from rapgate.gateway import BadRequest, Gateway, GatewayError, Unauthorized


def _bearer(authorization: str | None) -> str:
    if not authorization:
        raise Unauthorized("missing_token")
    scheme, _, token = authorization.partition(" ")
    if scheme.lower() != "bearer" or not token.strip():
        raise Unauthorized("missing_token")
    return token.strip()


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="rapgate", docs_url=None, redoc_url=None)
    app.state.gateway = gateway

    @app.exception_handler(GatewayError)
    async def _gateway_error(request: Request, exc: GatewayError):
        return JSONResponse(exc.to_document(), status_code=exc.status, headers=exc.headers)

    @app.post("/auth")
    def auth(body: Any = Body(...)):
        return gateway.authenticate(body).to_document()

    @app.post("/auth/refresh")
    def refresh(body: Any = Body(...), authorization: str | None = Header(default=None)):
        token = _bearer(authorization)
        if not isinstance(body, dict) or not isinstance(body.get("resource_id"), str):
            raise BadRequest("body needs resource_id and credentials")
        return gateway.refresh_after_trap(token, body["resource_id"], body.get("credentials") or {}).to_document()

    @app.api_route("/resource/{resource_id}", methods=["GET", "POST"])
    def resource(resource_id: str, request: Request, authorization: str | None = Header(default=None)):
        token = _bearer(authorization)
        return gateway.access_resource(token, resource_id, request.method).to_document()

    @app.post("/admin/policy/{resource_id}")
    def admin_policy(resource_id: str, body: Any = Body(...), x_admin_key: str | None = Header(default=None)):
        return {"resource_id": resource_id, "rap_Tno": gateway.admin_update_policy(resource_id, body, x_admin_key)}

    @app.get("/admin/audit")
    def admin_audit(
        subject: str | None = None,
        resource: str | None = None,
        jti: str | None = None,
        since: float | None = None,
        until: float | None = None,
        x_admin_key: str | None = Header(default=None),
    ):
        records = gateway.admin_audit(
            x_admin_key, subject=subject, resource_id=resource, jti=jti, since=since, until=until
        )
        return {"records": [r.to_document() for r in records]}

    return app
