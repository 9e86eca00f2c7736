import pytest
from fastapi.testclient import TestClient

from conftest import ADMIN
from rapgate.http import create_app

A = {"username": "userA", "password": "pw-A"}


@pytest.fixture
def client(gateway):
    return TestClient(create_app(gateway))


def bearer(tok):
    return {"Authorization": f"Bearer {tok}"}


def test_full_trap_cycle_over_http(client):
    r = client.post("/auth", json=A)
    assert r.status_code == 200 and r.json()["token_type"] == "Bearer"
    tok = r.json()["access_token"]
    assert client.get("/resource/X", headers=bearer(tok)).json()["content"] == "content of X"
    assert client.post("/resource/X", headers=bearer(tok)).status_code == 403

    r = client.post(
        "/admin/policy/X",
        json={"required_credentials": ["ip_address"], "rules": [{"action": "GET", "allowed_roles": ["analyst"]}]},
        headers={"X-Admin-Key": ADMIN},
    )
    assert r.json() == {"resource_id": "X", "rap_Tno": 1}

    r = client.get("/resource/X", headers=bearer(tok))
    assert r.status_code == 401
    assert r.headers["www-authenticate"] == 'RAP-Update resource="X", required_credentials="ip_address password username", rap_Tno="1"'
    assert r.json()["error"] == "rap_update_required" and r.json()["reason"] == "stale_binding"

    r = client.post("/auth/refresh", json={"resource_id": "X", "credentials": A}, headers=bearer(tok))
    assert r.status_code == 403 and r.json()["error"] == "policy_mismatch"
    r = client.post("/auth/refresh", json={"resource_id": "X", "credentials": {**A, "ip_address": "10.0.0.7"}}, headers=bearer(tok))
    assert r.status_code == 200 and r.json()["rap_Tno"] == 1
    new = r.json()["access_token"]
    assert client.get("/resource/X", headers=bearer(new)).status_code == 200
    r = client.get("/resource/X", headers=bearer(tok))
    assert r.status_code == 401 and r.json()["message"] == "token_revoked"

    r = client.get("/admin/audit", params={"subject": "userA", "resource": "X"}, headers={"X-Admin-Key": ADMIN})
    outcomes = [rec["outcome"] for rec in r.json()["records"]]
    assert outcomes == ["Allow", "Deny", "TrapRequired", "TrapRejected", "TrapResolved", "TokenIssued", "Allow", "Rejected"]


@pytest.mark.parametrize("headers", [{}, {"Authorization": "Basic abc"}, {"Authorization": "Bearer "}])
def test_missing_or_wrong_scheme(client, headers):
    r = client.get("/resource/X", headers=headers)
    assert r.status_code == 401 and r.headers["www-authenticate"].startswith("Bearer")


def test_status_codes(client):
    assert client.post("/auth", json={"username": "userA", "password": "x"}).status_code == 401
    r = client.post("/auth", json={"username": "userC", "password": "pw-C"})
    assert r.status_code == 401 and r.json()["error"] == "registration_required"
    assert client.post("/auth", json={"username": "userA", "otp": "1"}).status_code == 400
    assert client.post("/auth", json=[1]).status_code == 400
    tok = client.post("/auth", json=A).json()["access_token"]
    assert client.get("/resource/nope", headers=bearer(tok)).status_code == 404
    assert client.post("/auth/refresh", json={"resource_id": "X", "credentials": A}, headers=bearer(tok)).status_code == 409
    assert client.post("/auth/refresh", json={"credentials": A}, headers=bearer(tok)).status_code == 400
    assert client.post("/admin/policy/X", json={"rules": []}).status_code == 401
    assert client.post("/admin/policy/X", json={"rules": "x"}, headers={"X-Admin-Key": ADMIN}).status_code == 400
    assert client.post("/admin/policy/Q", json={"rules": []}, headers={"X-Admin-Key": ADMIN}).status_code == 404
    assert client.get("/admin/audit", headers={"X-Admin-Key": "no"}).status_code == 401
