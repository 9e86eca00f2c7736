"""Run the multi-client workload and check the audit log against the driver's own tallies.

    python demos/load_run.py [clients] [requests_per_client] [updates]
"""

import sys
import time

from rapgate.workload import (
    WorkloadSpec,
    audit_tallies,
    jti_chain_violations,
    replay_acceptances,
    run_workload,
    stale_allow_violations,
)

args = [int(a) for a in sys.argv[1:4]]
spec = WorkloadSpec(**dict(zip(("clients", "requests_per_client", "updates"), args)))

start = time.perf_counter()
result = run_workload(spec)
elapsed = time.perf_counter() - start
records = result.gateway.monitor.records
tallies = result.tallies.values()

print(f"{spec.clients} clients x {spec.requests_per_client} requests, {len(result.updates)} policy updates, {elapsed:.1f}s")
print(f"allow {sum(t.allows for t in tallies)}  deny {sum(t.denies for t in tallies)}  "
      f"trap {sum(t.traps for t in tallies)}  refresh {sum(t.refreshes for t in tallies)}")
print("audit records:", len(records))
print("stale Allow records:", len(stale_allow_violations(records, result.initial_versions)))
print(f"stale-token requests trapped: {result.stale_trapped}/{result.stale_requests}")
print("jti chain violations:", len(jti_chain_violations(records)))
print("max live tokens per jti:", max(replay_acceptances(result.gateway, result.issued).values()))
from_log = audit_tallies(result.gateway.monitor, result.users, result.gateway.clock.now())
same = sum((from_log[u].requests, from_log[u].traps, from_log[u].denies) == (t.requests, t.traps, t.denies)
           for u, t in result.tallies.items())
print(f"users whose counts the audit log reproduces: {same}/{len(result.tallies)}")
print("mispredicted outcomes:", len(result.mispredictions))
