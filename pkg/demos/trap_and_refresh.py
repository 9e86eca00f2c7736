"""Walk one client through a policy update on resource X.

userA logs in, reads X, the administrator adds an IP-address requirement to
X, and the next read is trapped. The client answers with its IP address and
gets a new token under the same jti; the old token stops working.

    python demos/trap_and_refresh.py
"""

import atexit
import shutil
import tempfile
from pathlib import Path

from rapgate import ManualClock
from rapgate.cli import bundled
from rapgate.gateway import Gateway, GatewayConfig, TrapChallenge, Unauthorized
from rapgate.tokens import decode_token

# work on a scratch copy so the bundled fixture stays untouched
scratch = tempfile.mkdtemp(prefix="rapgate-demo-")
atexit.register(shutil.rmtree, scratch, True)
workdir = Path(scratch) / "usecase"
shutil.copytree(bundled(""), workdir)
config = GatewayConfig.load(workdir / "config.json", env={})
gateway = Gateway.from_config(config, clock=ManualClock())

creds = {"username": "userA", "password": "userA-pass"}
token = gateway.authenticate(creds).access_token
jti = decode_token(token)[1].jti
print("issued token", jti[:8], "bound to", [b.resource_id for b in decode_token(token)[1].rapID])
print("GET X ->", gateway.access_resource(token, "X").content)

version = gateway.admin_update_policy(
    "X",
    {"required_credentials": ["username", "password", "ip_address"],
     "rules": [{"action": "GET", "allowed_roles": ["analyst"]}]},
    config.admin_key,
)
print("policy X is now version", version)

try:
    gateway.access_resource(token, "X")
except TrapChallenge as trap:
    print("GET X -> trapped:", trap.reason, "needs", ", ".join(trap.required_credentials))

fresh = gateway.refresh_after_trap(token, "X", {**creds, "ip_address": "10.0.0.7"})
print("refreshed; same jti:", decode_token(fresh.access_token)[1].jti == jti, "bound version", fresh.rap_Tno)
print("GET X with new token ->", gateway.access_resource(fresh.access_token, "X").content)
try:
    gateway.access_resource(token, "X")
except Unauthorized as exc:
    print("GET X with old token ->", exc.message)

print()
for rec in gateway.monitor.audit(jti=jti):
    print(f"{rec.seq:3d} {rec.outcome:16s} {rec.resource_id or '-':3s} {rec.reason}")
