"""In-vehicle update agent.

The agent is a small state machine advanced one step per :meth:`ClientAgent.tick`::

    IDLE -> CHECKING -> IDLE
                     -> DOWNLOADING -> VERIFYING -> INSTALLING -> REPORTING -> IDLE

Phases with nothing left to do (for example VERIFYING after a failed
download) still take their tick, so the path through the machine never
changes shape. Network access goes through ``client`` (anything with
``poll``/``download``/``report``) and hardware access through ``device``;
neither is ever allowed to crash the agent.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .client import FleetClient, HttpTransport
from .core import ArtifactKind, ContentDigest, VehicleProfile, Verdict, compute_digest, parse_version
from .errors import NotFound, OtaError
from .installers import SimulatedDevice
from .resolver import UpdateAction, UpdateManifest
from .service import ActionOutcome, InstallReport, Outcome

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL_MS = 5_000


class Phase(str, enum.Enum):
    IDLE = "IDLE"
    CHECKING = "CHECKING"
    DOWNLOADING = "DOWNLOADING"
    VERIFYING = "VERIFYING"
    INSTALLING = "INSTALLING"
    REPORTING = "REPORTING"


TRANSITIONS = {
    Phase.IDLE: {Phase.IDLE, Phase.CHECKING},
    Phase.CHECKING: {Phase.IDLE, Phase.DOWNLOADING},
    Phase.DOWNLOADING: {Phase.VERIFYING},
    Phase.VERIFYING: {Phase.INSTALLING},
    Phase.INSTALLING: {Phase.REPORTING},
    Phase.REPORTING: {Phase.IDLE},
}


class DownloadError(OtaError):
    pass


@dataclass(frozen=True)
class SlotImage:
    """Last-known-good image of a slot, kept for A/B fallback."""

    artifact_id: str
    version: str
    digest: ContentDigest


def verify_manifest(manifest: UpdateManifest, profile: VehicleProfile) -> Verdict:
    if manifest.vehicle_id != profile.vehicle_id:
        return Verdict(False, f"manifest addressed to {manifest.vehicle_id!r}")
    slots = profile.slots()
    for action in manifest.actions:
        if action.slot_name not in slots:
            return Verdict(False, f"unknown slot {action.slot_name!r}")
        installed = profile.installed_version(action.slot_name)
        if installed != action.from_version:
            return Verdict(
                False,
                f"state divergence on {action.slot_name!r}: installed {installed}, manifest expects {action.from_version}",
            )
    return Verdict(True)


def verify_payload(payload: bytes, expected: ContentDigest) -> Verdict:
    actual = compute_digest(payload)
    if actual != expected:
        return Verdict(False, f"digest mismatch: got {actual.hex[:12]}, expected {expected.hex[:12]}")
    return Verdict(True)


class ClientAgent:
    def __init__(
        self,
        profile: VehicleProfile,
        client: Any,
        device: SimulatedDevice,
        poll_interval_ms: int = DEFAULT_POLL_INTERVAL_MS,
    ):
        self.client = client
        self.device = device
        self.poll_interval_ms = poll_interval_ms
        self.local_profile = profile
        self.phase = Phase.IDLE
        self.next_poll_at = 0
        self.current_manifest: Optional[UpdateManifest] = None
        self.slot_history: dict[str, SlotImage] = {}
        self.last_report: Optional[InstallReport] = None
        self.catalog_revision: Optional[int] = None
        self._installed_ids = {slot: ref.artifact_id for slot, ref in profile.installed_services.items()}
        self._installed_ids.update({slot: ref.artifact_id for slot, ref in profile.installed_models.items()})
        self._reset_cycle()

    @property
    def vehicle_id(self) -> str:
        return self.local_profile.vehicle_id

    def _reset_cycle(self) -> None:
        self._response: Any = None
        self._rejection: Optional[str] = None
        self._payloads: list[bytes] = []
        self._verified = 0
        self._outcomes: dict[str, ActionOutcome] = {}
        self._stopped = False

    def _move(self, phase: Phase) -> None:
        assert phase in TRANSITIONS[self.phase], f"illegal transition {self.phase} -> {phase}"
        self.phase = phase

    # -- the state machine ----------------------------------------------

    def tick(self, now: int) -> list[dict]:
        """Run one phase step and return the effects it produced."""
        handler = {
            Phase.IDLE: self._tick_idle,
            Phase.CHECKING: self._tick_checking,
            Phase.DOWNLOADING: self._tick_downloading,
            Phase.VERIFYING: self._tick_verifying,
            Phase.INSTALLING: self._tick_installing,
            Phase.REPORTING: self._tick_reporting,
        }[self.phase]
        return handler(now)

    def _tick_idle(self, now: int) -> list[dict]:
        if now < self.next_poll_at:
            return []
        self._move(Phase.CHECKING)
        self.next_poll_at = now + self.poll_interval_ms
        self._reset_cycle()
        state = self.local_profile.installed_state()
        try:
            self._response = self.client.poll(self.vehicle_id, state, self.catalog_revision)
            outcome = "up_to_date" if self._response is None else "manifest"
        except OtaError as exc:
            self._response = exc
            outcome = "error"
        effect = {"effect": "poll", "state": state, "response": outcome}
        if isinstance(self._response, UpdateManifest):
            effect["manifest_id"] = self._response.manifest_id
        elif outcome == "error":
            effect["error"] = str(self._response)
        return [effect]

    def _tick_checking(self, now: int) -> list[dict]:
        response, self._response = self._response, None
        if not isinstance(response, UpdateManifest):
            self._move(Phase.IDLE)
            return []
        self.current_manifest = response
        verdict = verify_manifest(response, self.local_profile)
        self._move(Phase.DOWNLOADING)
        if not verdict:
            self._rejection = verdict.reason
            self._stopped = True
            if response.vehicle_id == self.vehicle_id:
                for action in response.actions:
                    self._record(action, Outcome.FAILED_INSTALL)
        return [{"effect": "verify_manifest", "manifest_id": response.manifest_id, "accepted": verdict.ok,
                 "reason": verdict.reason}]

    def _tick_downloading(self, now: int) -> list[dict]:
        effects = []
        if not self._stopped:
            for action in self.current_manifest.actions:
                try:
                    payload = self.client.download(action)
                except OtaError as exc:
                    self._record(action, Outcome.FAILED_DOWNLOAD)
                    self._stopped = True
                    effects.append({"effect": "download", "slot": action.slot_name, "ok": False, "error": str(exc)})
                    break
                self._payloads.append(payload)
                effects.append({"effect": "download", "slot": action.slot_name, "ok": True, "bytes": len(payload)})
        self._move(Phase.VERIFYING)
        return effects

    def _tick_verifying(self, now: int) -> list[dict]:
        effects = []
        for action, payload in zip(self.current_manifest.actions if self.current_manifest else (), self._payloads):
            verdict = verify_payload(payload, action.digest)
            effects.append({"effect": "verify_payload", "slot": action.slot_name, "ok": verdict.ok})
            if not verdict:
                self._record(action, Outcome.FAILED_INTEGRITY)
                self._stopped = True
                break
            self._verified += 1
        self._move(Phase.INSTALLING)
        return effects

    def _tick_installing(self, now: int) -> list[dict]:
        effects = []
        actions = self.current_manifest.actions if self.current_manifest else ()
        for action, payload in zip(actions[: self._verified], self._payloads):
            outcome, detail = self.apply_action(action, payload)
            effects.append(
                {"effect": "install", "slot": action.slot_name, "to": str(action.to_version),
                 "ok": outcome.status is Outcome.SUCCEEDED, "detail": detail}
            )
            if outcome.status is not Outcome.SUCCEEDED:
                break
        self._move(Phase.REPORTING)
        return effects

    def _tick_reporting(self, now: int) -> list[dict]:
        effects = []
        manifest = self.current_manifest
        if manifest is not None and manifest.vehicle_id == self.vehicle_id:
            report = InstallReport(
                vehicle_id=self.vehicle_id,
                manifest_id=manifest.manifest_id,
                outcomes=dict(self._outcomes),
                digest_verified=self._verified == len(manifest.actions),
                timestamp=now,
                detail=self._rejection or "",
            )
            self.last_report = report
            try:
                self.client.report(report)
                effects.append({"effect": "report", "report": report.to_dict(), "delivered": True})
            except OtaError as exc:
                effects.append({"effect": "report", "report": report.to_dict(), "delivered": False,
                                "error": str(exc)})
        self.current_manifest = None
        self._reset_cycle()
        self._move(Phase.IDLE)
        return effects

    # -- per-action work -------------------------------------------------

    def _record(self, action: UpdateAction, status: Outcome) -> ActionOutcome:
        try:
            current = self.local_profile.installed_version(action.slot_name)
        except KeyError:
            current = action.from_version
        # failures leave the slot where it was, so from == resulting == what is really installed
        outcome = ActionOutcome(status, current, current)
        self._outcomes[action.slot_name] = outcome
        return outcome

    def apply_action(self, action: UpdateAction, payload: bytes) -> tuple[ActionOutcome, str]:
        """Install one verified payload through the installer for the slot's kind."""
        slot = action.slot_name
        kind = self.local_profile.slots()[slot].kind
        previous = SlotImage(
            self._installed_ids.get(slot, ""),
            str(self.local_profile.installed_version(slot)),
            compute_digest(self._active_image(kind, slot)),
        )
        result = self.device.install(kind, slot, payload, action.to_version, action.model)
        if not result.ok:
            return self._record(action, Outcome.FAILED_INSTALL), result.detail
        if str(action.to_version) != previous.version or previous.digest != action.digest:
            self.slot_history[slot] = previous
        self.local_profile = self.local_profile.with_installed(slot, action.to_version, action.artifact_id)
        self._installed_ids[slot] = action.artifact_id
        outcome = ActionOutcome(Outcome.SUCCEEDED, action.from_version, action.to_version)
        self._outcomes[slot] = outcome
        return outcome, result.detail

    def _active_image(self, kind: ArtifactKind, slot: str) -> bytes:
        entry = self.device.state[{"FIRMWARE_BINARY": "firmware", "CONTAINER_IMAGE": "containers",
                                   "AI_MODEL": "models"}[kind.value]][slot]
        return entry.get("image", entry.get("blob", b""))

    def local_rollback(self, slot: str) -> SlotImage:
        """Fall back to the last-known-good image without contacting the cloud."""
        previous = self.slot_history.get(slot)
        if previous is None:
            raise NotFound(f"no rollback history for slot {slot!r}")
        self.device.activate_previous(slot)
        del self.slot_history[slot]
        self.local_profile = self.local_profile.with_installed(
            slot, parse_version(previous.version), previous.artifact_id or None
        )
        if previous.artifact_id:
            self._installed_ids[slot] = previous.artifact_id
        return previous


@dataclass(frozen=True)
class AgentConfig:
    profile: VehicleProfile
    server_url: str
    token: Optional[str] = None
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_MS / 1000

    @classmethod
    def load(cls, path: str | Path) -> "AgentConfig":
        data = json.loads(Path(path).read_text())
        return cls(
            profile=VehicleProfile.from_dict(data["profile"]),
            server_url=data["server_url"],
            token=data.get("token"),
            poll_interval_s=float(data.get("poll_interval_s", DEFAULT_POLL_INTERVAL_MS / 1000)),
        )


def run_agent(
    config: AgentConfig,
    device: Optional[SimulatedDevice] = None,
    max_ticks: Optional[int] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ClientAgent:
    """Drive an agent against a live service in wall-clock time."""
    client = FleetClient(HttpTransport(config.server_url, config.token))
    client.register(config.profile)
    agent = ClientAgent(
        config.profile,
        client,
        device or SimulatedDevice.from_profile(config.profile),
        int(config.poll_interval_s * 1000),
    )
    ticks = 0
    while max_ticks is None or ticks < max_ticks:
        now = int(time.monotonic() * 1000)
        for effect in agent.tick(now):
            log.info("%s %s", agent.vehicle_id, effect.get("effect"))
        ticks += 1
        if agent.phase is Phase.IDLE:
            sleep(max(0.0, (agent.next_poll_at - now) / 1000))
    return agent
