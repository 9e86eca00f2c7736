"""Command line: ``rapgate serve | simulate | audit``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources

from rapgate.gateway import Gateway, GatewayConfig
from rapgate.monitor import ActivityMonitor
from rapgate.scenario import ScenarioParseError, run_scenario_file

log = logging.getLogger("rapgate")


def bundled(name: str) -> str:
    """Path of a file in the bundled use-case fixture, e.g. ``bundled("scenario.json")``."""
    return str(resources.files("rapgate") / "data" / "usecase" / name)


def _serve(args) -> int:
    import uvicorn

    from rapgate.http import create_app

    config = GatewayConfig.load(args.config)
    gateway = Gateway.from_config(config)
    try:
        uvicorn.run(create_app(gateway), host=config.host, port=config.port, log_level=args.log_level)
    finally:
        gateway.close()
    return 0


def _simulate(args) -> int:
    try:
        transcript = run_scenario_file(args.scenario, args.config, args.transcript, in_place=args.in_place)
    except ScenarioParseError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    if args.transcript is None:
        sys.stdout.write(transcript.to_lines())
    for failure in transcript.failures:
        print(f"assert failed at step {failure['index']}: {'; '.join(failure['problems'])}", file=sys.stderr)
    return 0 if transcript.ok else 1


def _audit(args) -> int:
    config = GatewayConfig.load(args.config)
    if config.audit_sink_path is None or not config.audit_sink_path.exists():
        print("no audit sink", file=sys.stderr)
        return 1
    monitor = ActivityMonitor(config.audit_sink_path)
    try:
        for rec in monitor.audit(subject=args.subject, resource_id=args.resource, jti=args.jti, outcome=args.outcome):
            print(json.dumps(rec.to_document(), sort_keys=True))
    finally:
        monitor.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rapgate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP gateway")
    p.add_argument("--config", required=True)
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=_serve)

    p = sub.add_parser("simulate", help="run a scenario file; exit 1 if any assert fails")
    p.add_argument("--scenario", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--transcript", help="write the transcript here instead of stdout")
    p.add_argument("--in-place", action="store_true", help="mutate the configured policy DB and audit sink")
    p.set_defaults(func=_simulate)

    p = sub.add_parser("audit", help="print audit records as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--subject")
    p.add_argument("--resource")
    p.add_argument("--jti")
    p.add_argument("--outcome")
    p.set_defaults(func=_audit)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
