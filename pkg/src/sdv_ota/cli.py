"""Operator command line: ``sdv-ota <command>``.

Every command except ``serve``, ``agent`` and ``simulate`` is a thin HTTP
client of a running service; nothing is kept between invocations.

Exit codes: 0 ok, 1 simulation assertions failed, 2 malformed input,
3 service unreachable, 4 permission denied, 5 other API error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .agent import AgentConfig, run_agent
from .api import ApiRouter
from .client import FleetClient, HttpTransport, ServiceUnavailable
from .core import ArtifactDescriptor, compute_digest
from .errors import OtaError, PermissionDenied, ScenarioError, ValidationError
from .resolver import DependencyMatrix
from .server import ServiceServer
from .service import CloudService
from .sim import run_scenario
from .store import ArtifactStore, load_tokens

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_MALFORMED = 2
EXIT_CONNECTION = 3
EXIT_PERMISSION = 4
EXIT_API = 5

DEFAULT_SERVER = "http://127.0.0.1:8080"


class MalformedInput(Exception):
    pass


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise MalformedInput(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: not valid JSON: {exc}") from None


def _emit(args, document: Any, human: str) -> None:
    if args.format == "json":
        print(json.dumps(document, sort_keys=True))
    else:
        print(human)


def _client(args) -> FleetClient:
    return FleetClient(HttpTransport(args.server, args.token))


# -- commands ----------------------------------------------------------------


def build_service(config: dict, base: Path = Path(".")) -> CloudService:
    """Assemble store + service from a serve config document.

    Keys: ``store_root`` (omit for in-memory), ``tokens`` (token -> permission
    list) or ``tokens_file``, ``matrix`` or ``matrix_file``.
    """
    if "tokens_file" in config:
        tokens = load_tokens(base / config["tokens_file"])
    else:
        tokens = config.get("tokens") or {}
    root = config.get("store_root")
    store = ArtifactStore(None if root is None else base / root, tokens)
    if "matrix_file" in config:
        matrix = DependencyMatrix.load(base / config["matrix_file"])
    else:
        matrix = DependencyMatrix.from_dict(config.get("matrix") or {})
    return CloudService(store, matrix)


def cmd_serve(args) -> int:
    config = _read_json(args.config)
    try:
        service = build_service(config, Path(args.config).resolve().parent)
    except (KeyError, ValueError, OtaError) as exc:
        raise MalformedInput(f"bad config: {exc}") from None
    host = args.host or config.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(config.get("port", 8080))
    server = ServiceServer(ApiRouter(service), host, port)
    print(f"serving on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_publish(args) -> int:
    raw = _read_json(args.descriptor)
    try:
        payload = Path(args.payload).read_bytes()
    except OSError as exc:
        raise MalformedInput(f"cannot read {args.payload}: {exc.strerror or exc}") from None
    # digest and size may be left out of hand-written descriptors
    raw = dict(raw)
    raw.setdefault("digest", str(compute_digest(payload)))
    raw.setdefault("size_bytes", len(payload))
    try:
        descriptor = ArtifactDescriptor.from_dict(raw)
    except (KeyError, ValueError) as exc:
        raise MalformedInput(f"bad descriptor: {exc}") from None
    stored = _client(args).publish(descriptor, payload)
    _emit(args, stored.to_dict(), f"published {stored.ref} {stored.digest} ({stored.size_bytes} bytes)")
    return EXIT_OK


def _campaign_text(c: dict) -> str:
    lines = [f"campaign {c['campaign_id']} [{c['purpose']}]: {c['state_label']}"]
    for vid, status in c["vehicle_status"].items():
        lines.append(f"  {vid:<20} {status}")
    if c.get("unrestorable"):
        lost = ", ".join(f"{u['vehicle']}:{u['slot']}@{u['version']}" for u in c["unrestorable"])
        lines.append(f"  unrestorable: {lost}")
    return "\n".join(lines)


def cmd_campaign(args) -> int:
    client = _client(args)
    if args.campaign_cmd == "create":
        spec = _read_json(args.spec)
        if not isinstance(spec, dict):
            raise MalformedInput("campaign spec must be a JSON object")
        result = client.create_campaign(spec)
    else:
        result = client.campaign(args.campaign_id)
    _emit(args, result, _campaign_text(result))
    return EXIT_OK


def cmd_rollback(args) -> int:
    if not args.variant and not args.vehicle:
        raise MalformedInput("rollback needs at least one --variant or --vehicle")
    result = _client(args).rollback(args.variant, args.vehicle, args.campaign_id)
    _emit(args, result, _campaign_text(result))
    return EXIT_OK


def fleet_table(snapshot: dict) -> str:
    rows = [("VEHICLE", "VARIANT", "SLOTS")]
    for v in snapshot["vehicles"]:
        slots = ", ".join(f"{slot}={ver}" for slot, ver in v["slots"].items())
        rows.append((v["vehicle_id"], v["variant_id"], slots))
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    return "\n".join(f"{a:<{w0}}  {b:<{w1}}  {c}".rstrip() for a, b, c in rows)


def cmd_fleet(args) -> int:
    snapshot = _client(args).fleet()
    _emit(args, snapshot, fleet_table(snapshot))
    return EXIT_OK


def cmd_agent(args) -> int:
    try:
        config = AgentConfig.load(args.config)
    except (OSError, KeyError, ValueError, OtaError) as exc:
        raise MalformedInput(f"bad agent config: {exc}") from None
    try:
        agent = run_agent(config, max_ticks=args.ticks)
    except KeyboardInterrupt:
        return EXIT_OK
    _emit(args, {"vehicle_id": agent.vehicle_id, "slots": agent.local_profile.installed_state()},
          f"{agent.vehicle_id}: " + ", ".join(f"{k}={v}" for k, v in agent.local_profile.installed_state().items()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        result = run_scenario(args.scenario, transport=args.transport)
    except ScenarioError as exc:
        raise MalformedInput(str(exc)) from None
    if args.log:
        Path(args.log).write_bytes(result.log_bytes())
    document = {
        "scenario": result.scenario,
        "passed": result.passed,
        "assertions": [{"name": a.name, "passed": a.passed, "detail": a.detail} for a in result.assertions],
        "errors": list(result.errors),
        "final_versions": result.final_versions(),
    }
    lines = [f"scenario {result.scenario}: {'PASS' if result.passed else 'FAIL'}"]
    for vid, slots in document["final_versions"].items():
        variant = result.agents[vid].local_profile.variant_id
        lines.append(f"  {vid} ({variant}): " + ", ".join(f"{s}={v}" for s, v in slots.items()))
    for a in result.assertions:
        lines.append(f"  [{'ok' if a.passed else 'FAIL'}] {a.name}: {a.detail}")
    for err in result.errors:
        lines.append(f"  error: {err}")
    _emit(args, document, "\n".join(lines))
    return EXIT_OK if result.passed else EXIT_ASSERTION


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdv-ota", description="OTA update service, fleet and simulator tools.")
    parser.add_argument("--server", default=os.environ.get("FLEET_SERVER", DEFAULT_SERVER),
                        help="service base URL (env FLEET_SERVER)")
    parser.add_argument("--token", default=os.environ.get("FLEET_TOKEN"), help="bearer token (env FLEET_TOKEN)")
    parser.add_argument("--format", choices=("human", "json"), default="human")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the cloud service until interrupted")
    p.add_argument("--config", required=True, help="JSON config: store_root, tokens, matrix, host, port")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("publish", help="publish an artifact")
    p.add_argument("descriptor", help="descriptor JSON (digest/size_bytes optional)")
    p.add_argument("payload", help="payload file")
    p.set_defaults(func=cmd_publish)

    p = sub.add_parser("campaign", help="create or inspect campaigns")
    csub = p.add_subparsers(dest="campaign_cmd", required=True)
    c = csub.add_parser("create")
    c.add_argument("spec", help="campaign spec JSON: filter, strategy, catalog_scope, campaign_id")
    c = csub.add_parser("status")
    c.add_argument("campaign_id")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("rollback", help="roll vehicles back to their pinned versions")
    p.add_argument("--variant", action="append", default=[])
    p.add_argument("--vehicle", action="append", default=[])
    p.add_argument("--campaign-id")
    p.set_defaults(func=cmd_rollback)

    p = sub.add_parser("fleet", help="print the fleet ledger")
    p.set_defaults(func=cmd_fleet)

    p = sub.add_parser("agent", help="run one vehicle agent against a live service")
    p.add_argument("--config", required=True, help="JSON: profile, server_url, token, poll_interval_s")
    p.add_argument("--ticks", type=int, help="stop after this many state-machine steps")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("simulate", help="run a fleet scenario")
    p.add_argument("scenario", help="scenario file or built-in name")
    p.add_argument("--transport", choices=("inproc", "http"), default="inproc")
    p.add_argument("--log", help="write the JSONL event log here")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_MALFORMED if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except MalformedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except ServiceUnavailable as exc:
        print(f"error: cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    except PermissionDenied as exc:
        print(f"error: permission denied: {exc}", file=sys.stderr)
        return EXIT_PERMISSION
    except ValidationError as exc:
        print(f"error: rejected: {exc}", file=sys.stderr)
        return EXIT_API
    except OtaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_API


if __name__ == "__main__":
    sys.exit(main())
