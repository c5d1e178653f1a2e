"""Deterministic discrete-event fleet simulator.

A scenario wires one cloud service, one agent and simulated device per
vehicle, and a timeline of operator actions (publishes, pins, campaigns,
rollbacks) and assertions. Events run in (time, source, sequence) order on a
single thread, with all randomness drawn from one seeded generator, so a
scenario always produces the same line-delimited JSON event log.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .agent import ClientAgent, DownloadError, Phase
from .api import ApiRouter
from .client import FleetClient, HttpTransport, InProcessTransport
from .core import (
    ArtifactDescriptor,
    ArtifactRef,
    VehicleProfile,
    compute_digest,
    parse_version,
)
from .errors import OtaError, ScenarioError
from .images import generate_body, pack_image
from .installers import Fault, FaultInjector, SimulatedDevice
from .resolver import DependencyMatrix, UpdateAction
from .server import ServiceServer
from .service import CloudService
from .store import ArtifactStore, Permission, canonical_json

log = logging.getLogger(__name__)

ADMIN_TOKEN = "sim-admin"
VEHICLE_TOKEN = "sim-vehicle"
LATENCY_FIELDS = frozenset({"latency_ms", "wall_ms"})
ASSERTION_TYPES = ("vehicle_versions", "campaign_state", "vehicle_status", "model_classes", "agents_idle")


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    fleet: list = field(default_factory=list)
    matrix: DependencyMatrix = field(default_factory=DependencyMatrix)
    publishes: list = field(default_factory=list)
    pins: list = field(default_factory=list)
    campaigns: list = field(default_factory=list)
    rollbacks: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    fault_rate: float = 0.0
    assertions: list = field(default_factory=list)
    poll_interval_ms: int = 5_000
    latency_ms: tuple = (5, 50)
    time_cap_ms: int = 30 * 60 * 1000

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scenario":
        try:
            fleet = [VehicleProfile.from_dict(p) for p in data.get("fleet", [])]
            ids = [p.vehicle_id for p in fleet]
            if len(ids) != len(set(ids)):
                raise ScenarioError("vehicle ids must be unique")
            latency = data.get("latency_ms", {"min": 5, "max": 50})
            lo, hi = int(latency["min"]), int(latency["max"])
            if not 0 <= lo <= hi:
                raise ScenarioError("latency_ms needs 0 <= min <= max")
            faults = []
            for f in data.get("faults", []):
                if f.get("vehicle") not in ids:
                    raise ScenarioError(f"fault targets unknown vehicle {f.get('vehicle')!r}")
                faults.append((f["vehicle"], Fault.from_dict(f)))
            for a in data.get("assertions", []):
                if a.get("type") not in ASSERTION_TYPES:
                    raise ScenarioError(f"unknown assertion type {a.get('type')!r}")
            scenario = cls(
                name=data.get("name", "scenario"),
                seed=int(data.get("seed", 0)),
                fleet=fleet,
                matrix=DependencyMatrix.from_dict(data.get("matrix", {})),
                publishes=list(data.get("publishes", [])),
                pins=list(data.get("pins", [])),
                campaigns=list(data.get("campaigns", [])),
                rollbacks=list(data.get("rollbacks", [])),
                faults=faults,
                fault_rate=float(data.get("fault_rate", 0.0)),
                assertions=list(data.get("assertions", [])),
                poll_interval_ms=int(data.get("poll_interval_ms", 5_000)),
                latency_ms=(lo, hi),
                time_cap_ms=int(data.get("time_cap_ms", 30 * 60 * 1000)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError, OtaError) as exc:
            raise ScenarioError(f"malformed scenario: {type(exc).__name__}: {exc}") from None
        if scenario.poll_interval_ms <= 0:
            raise ScenarioError("poll_interval_ms must be positive")
        return scenario

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(data)


def builtin_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("sdv_ota.scenarios").iterdir() if p.name.endswith(".json"))


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """Load a scenario from a file path or by built-in name (e.g. ``s4a-update``)."""
    path = Path(ref)
    if path.exists():
        return Scenario.load(path)
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    candidate = resources.files("sdv_ota.scenarios") / f"{name}.json"
    if candidate.is_file():
        return Scenario.from_dict(json.loads(candidate.read_text()))
    raise ScenarioError(f"no scenario file or built-in scenario named {str(ref)!r}")


def build_payload(version: str, spec: Optional[Mapping[str, Any]]) -> bytes:
    """Scenario payloads are described by size and seed, never stored."""
    spec = spec or {}
    body = generate_body(int(spec.get("size", 256)), spec.get("seed", version))
    if spec.get("raw"):
        return body
    image = pack_image(parse_version(version), body)
    if spec.get("malformed"):
        image = b"BADMAGIC" + image[8:]
    return image


def build_artifact(data: Mapping[str, Any], payload_spec: Optional[Mapping[str, Any]]) -> tuple[ArtifactDescriptor, bytes]:
    payload = build_payload(data["version"], payload_spec)
    desc = dict(data)
    desc["digest"] = str(compute_digest(payload))
    desc["size_bytes"] = len(payload)
    return ArtifactDescriptor.from_dict(desc), payload


class FaultyDownloads:
    """Vehicle-side client wrapper applying scheduled download faults."""

    def __init__(self, client: FleetClient, faults: FaultInjector):
        self.client = client
        self.faults = faults

    def poll(self, *args, **kwargs):
        return self.client.poll(*args, **kwargs)

    def report(self, report):
        return self.client.report(report)

    def download(self, action: UpdateAction) -> bytes:
        fault = self.faults.next(action.slot_name, "download")
        payload = self.client.download(action)
        if fault is None:
            return payload
        if fault.type == "download":
            raise DownloadError(f"download of {action.slot_name!r} interrupted")
        corrupted = bytearray(payload)
        if corrupted:
            corrupted[fault.position % len(corrupted)] ^= 0xFF
        return bytes(corrupted)


@dataclass
class AssertionResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SimResult:
    scenario: str
    records: list
    assertions: list
    errors: list
    agents: dict
    devices: dict
    service: CloudService

    @property
    def passed(self) -> bool:
        return not self.errors and all(a.passed for a in self.assertions)

    def log_bytes(self, strip_latency: bool = False) -> bytes:
        return encode_log(self.records, strip_latency)

    def final_versions(self) -> dict:
        return {vid: agent.local_profile.installed_state() for vid, agent in sorted(self.agents.items())}

    def events(self, name: str) -> list[dict]:
        return [r for r in self.records if r["event"] == name]


def encode_log(records: Iterable[Mapping[str, Any]], strip_latency: bool = False) -> bytes:
    lines = []
    for r in records:
        if strip_latency:
            r = {k: v for k, v in r.items() if k not in LATENCY_FIELDS}
        lines.append(canonical_json(r) + b"\n")
    return b"".join(lines)


@dataclass(frozen=True)
class Divergence:
    line: int
    a: Optional[str]
    b: Optional[str]


def replay_check(log_a: Union[bytes, SimResult], log_b: Union[bytes, SimResult]) -> Optional[Divergence]:
    """None when two logs are byte-identical, else the first differing line."""
    a = log_a.log_bytes() if isinstance(log_a, SimResult) else bytes(log_a)
    b = log_b.log_bytes() if isinstance(log_b, SimResult) else bytes(log_b)
    if a == b:
        return None
    lines_a, lines_b = a.splitlines(), b.splitlines()
    for i in range(max(len(lines_a), len(lines_b))):
        la = lines_a[i] if i < len(lines_a) else None
        lb = lines_b[i] if i < len(lines_b) else None
        if la != lb:
            return Divergence(i, None if la is None else la.decode(), None if lb is None else lb.decode())
    return Divergence(min(len(lines_a), len(lines_b)), None, None)  # differ only in trailing bytes


class FleetSimulation:
    def __init__(self, scenario: Scenario, transport: str = "inproc"):
        if transport not in ("inproc", "http"):
            raise ValueError(f"unknown transport {transport!r}")
        self.scenario = scenario
        self.transport = transport
        self.now = 0
        self.rng = random.Random(scenario.seed)
        self.records: list[dict] = []
        self.errors: list[str] = []
        self.assertion_results: list[AssertionResult] = []
        self._queue: list = []
        self._seq = 0
        self._scenario_pending = 0

        self.store = ArtifactStore(
            None,
            tokens={ADMIN_TOKEN: list(Permission), VEHICLE_TOKEN: [Permission.FETCH]},
        )
        self.service = CloudService(self.store, clock=lambda: self.now)
        self.service.listeners.append(self._on_service_event)
        self.router = ApiRouter(self.service)
        self.server: Optional[ServiceServer] = None

    # -- logging --------------------------------------------------------

    def _log(self, src: str, event: str, **fields: Any) -> None:
        record = {"t": self.now, "n": len(self.records), "src": src, "event": event}
        record.update(fields)
        self.records.append(record)

    def _on_service_event(self, event: dict) -> None:
        fields = dict(event)
        name = fields.pop("event")
        self._log("service", name, **fields)

    # -- scheduling -----------------------------------------------------

    def _push(self, time: int, src: str, kind: str, data: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (int(time), src, self._seq, kind, data))

    def _latency(self) -> int:
        lo, hi = self.scenario.latency_ms
        return self.rng.randint(lo, hi)

    def _client(self, token: str) -> FleetClient:
        if self.server is not None:
            return FleetClient(HttpTransport(self.server.url, token))
        return FleetClient(InProcessTransport(self.router, token))

    # -- main loop ------------------------------------------------------

    def run(self) -> SimResult:
        sc = self.scenario
        if self.transport == "http":
            self.server = ServiceServer(self.router).start()
        try:
            return self._run(sc)
        finally:
            if self.server is not None:
                self.server.stop()

    def _run(self, sc: Scenario) -> SimResult:
        admin = self._client(ADMIN_TOKEN)
        self.admin = admin
        self._log("sim", "start", scenario=sc.name, seed=sc.seed, vehicles=len(sc.fleet))
        if sc.matrix.entries:
            admin.set_matrix(sc.matrix)

        self.agents: dict[str, ClientAgent] = {}
        self.devices: dict[str, SimulatedDevice] = {}
        faults_by_vehicle: dict[str, list] = {}
        for vid, fault in sc.faults:
            faults_by_vehicle.setdefault(vid, []).append(fault)
        for profile in sc.fleet:
            injector = FaultInjector(
                faults_by_vehicle.get(profile.vehicle_id, ()), seed=f"{sc.seed}:{profile.vehicle_id}", rate=sc.fault_rate
            )
            device = SimulatedDevice.from_profile(profile, injector)
            client = FaultyDownloads(self._client(VEHICLE_TOKEN), injector)
            client.client.register(profile)
            agent = ClientAgent(profile, client, device, sc.poll_interval_ms)
            agent.next_poll_at = self.rng.randrange(sc.poll_interval_ms)
            self.agents[profile.vehicle_id] = agent
            self.devices[profile.vehicle_id] = device
            self._push(agent.next_poll_at, f"vehicle:{profile.vehicle_id}", "tick", profile.vehicle_id)

        for item in sc.publishes:
            self._push_scenario(item, "compose" if "compose" in item else "publish")
        for item in sc.pins:
            self._push_scenario(item, "pin")
        for item in sc.campaigns:
            self._push_scenario(item, "campaign")
        for item in sc.rollbacks:
            self._push_scenario(item, "rollback")
        end_assertions = []
        for item in sc.assertions:
            if item.get("at", "end") == "end":
                end_assertions.append(item)
            else:
                self._push_scenario(item, "assert", time_key="at")

        while self._queue and not self._finished():
            time, src, _seq, kind, data = heapq.heappop(self._queue)
            if time > sc.time_cap_ms:
                self.now = sc.time_cap_ms
                self._log("sim", "time_cap")
                break
            self.now = time
            if kind == "tick":
                self._agent_tick(data)
            else:
                self._scenario_pending -= 1
                self._scenario_event(kind, data)
            self.service.evaluate_all()

        for item in end_assertions:
            self._check(item)
        self._log(
            "sim",
            "stop",
            vehicles=len(self.agents),
            phases={vid: a.phase.value for vid, a in sorted(self.agents.items())},
            campaigns={cid: c.state_label() for cid, c in sorted(self.service.campaigns.items())},
        )
        return SimResult(
            scenario=sc.name,
            records=self.records,
            assertions=self.assertion_results,
            errors=self.errors,
            agents=self.agents,
            devices=self.devices,
            service=self.service,
        )

    def _push_scenario(self, item: Mapping[str, Any], kind: str, time_key: str = "time") -> None:
        self._scenario_pending += 1
        self._push(int(item.get(time_key, 0)), "scenario", kind, item)

    def _finished(self) -> bool:
        return (
            self._scenario_pending == 0
            and all(a.phase is Phase.IDLE for a in self.agents.values())
            and not self.service.active_campaigns()
        )

    def _agent_tick(self, vehicle_id: str) -> None:
        agent = self.agents[vehicle_id]
        before = agent.phase
        effects = agent.tick(self.now)
        if agent.phase is Phase.IDLE:
            delay = max(1, agent.next_poll_at - self.now)
        else:
            delay = self._latency()
        if effects or agent.phase is not before:
            self._log(
                f"vehicle:{vehicle_id}",
                "agent_step",
                vehicle=vehicle_id,
                phase_from=before.value,
                phase_to=agent.phase.value,
                effects=effects,
                latency_ms=delay,
            )
        self._push(self.now + delay, f"vehicle:{vehicle_id}", "tick", vehicle_id)

    def _scenario_event(self, kind: str, item: Mapping[str, Any]) -> None:
        try:
            if kind == "publish":
                desc, payload = build_artifact(item["artifact"], item.get("payload"))
                stored = self.admin.publish(desc, payload)
                self._log("scenario", "publish", artifact=str(stored.ref), kind=stored.kind.value,
                          digest=str(stored.digest))
            elif kind == "compose":
                spec = item["compose"]
                stored = self.admin.compose(
                    ArtifactRef.from_dict(spec["container"]),
                    ArtifactRef.from_dict(spec["model"]),
                    parse_version(spec["version"]),
                )
                self._log("scenario", "compose", artifact=str(stored.ref), embedded=str(stored.embedded_model),
                          digest=str(stored.digest))
            elif kind == "pin":
                self.admin.set_pin(item["variant_id"], item["slot_name"], parse_version(item["version"]))
                self._log("scenario", "pin", variant=item["variant_id"], slot=item["slot_name"],
                          version=item["version"])
            elif kind == "campaign":
                spec = {k: v for k, v in item.items() if k != "time"}
                created = self.admin.create_campaign(spec)
                self._log("scenario", "campaign", campaign=created["campaign_id"], state=created["state_label"])
            elif kind == "rollback":
                created = self.admin.rollback(item.get("variants"), item.get("vehicles"), item.get("campaign_id"))
                self._log("scenario", "rollback", campaign=created["campaign_id"], state=created["state_label"])
            elif kind == "assert":
                self._check(item)
        except (OtaError, KeyError, ValueError) as exc:
            message = f"{kind} at t={self.now} failed: {type(exc).__name__}: {exc}"
            self.errors.append(message)
            self._log("scenario", "operation_failed", kind=kind, error=message)

    # -- assertions -----------------------------------------------------

    def _check(self, item: Mapping[str, Any]) -> None:
        name = item.get("name") or item["type"]
        try:
            passed, detail = getattr(self, f"_assert_{item['type']}")(item)
        except (KeyError, OtaError) as exc:
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        result = AssertionResult(name, passed, detail)
        self.assertion_results.append(result)
        self._log("sim", "assertion", name=name, passed=passed, detail=detail)

    def _assert_vehicle_versions(self, item) -> tuple[bool, str]:
        vid = item["vehicle"]
        expected = dict(item["slots"])
        source = item.get("source", "both")
        views = {}
        if source in ("agent", "both"):
            views["agent"] = self.agents[vid].local_profile.installed_state()
            views["device"] = {slot: self.devices[vid].version(slot) for slot in expected}
        if source in ("ledger", "both"):
            views["ledger"] = self.service.profile(vid).installed_state()
        problems = [
            f"{view}:{slot}={state.get(slot)}!={want}"
            for view, state in views.items()
            for slot, want in expected.items()
            if state.get(slot) != want
        ]
        return not problems, "; ".join(problems) or f"{vid} matches {expected}"

    def _assert_campaign_state(self, item) -> tuple[bool, str]:
        campaign = self.service.get_campaign(item["campaign"])
        want = item["state"]
        ok = want in (campaign.state.value, campaign.state_label())
        return ok, f"{campaign.campaign_id} is {campaign.state_label()}"

    def _assert_vehicle_status(self, item) -> tuple[bool, str]:
        campaign = self.service.get_campaign(item["campaign"])
        status = campaign.status.get(item["vehicle"])
        got = None if status is None else status.value
        return got == item["status"], f"{item['vehicle']} is {got}"

    def _assert_model_classes(self, item) -> tuple[bool, str]:
        classes = self.devices[item["vehicle"]].detectable_classes(item["slot"])
        missing = [c for c in item.get("includes", []) if c not in classes]
        return not missing, f"classes={classes}" + (f" missing={missing}" if missing else "")

    def _assert_agents_idle(self, item) -> tuple[bool, str]:
        busy = {vid: a.phase.value for vid, a in self.agents.items() if a.phase is not Phase.IDLE}
        return not busy, f"busy={busy}" if busy else "all agents idle"


def run_scenario(scenario: Union[Scenario, Mapping[str, Any], str, Path], transport: str = "inproc") -> SimResult:
    if isinstance(scenario, Mapping):
        scenario = Scenario.from_dict(scenario)
    elif not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    return FleetSimulation(scenario, transport).run()
