"""Simulated deployment targets: ECU flashing, container runtime, model mounts.

A :class:`SimulatedDevice` stands in for one vehicle's hardware. Every slot
keeps an active bank and, after the first successful install, an inactive
bank holding the image it replaced. Installers either fully succeed or leave
the device state untouched.
"""

from __future__ import annotations

import copy
import enum
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .core import ArtifactKind, SemanticVersion, VehicleProfile
from .errors import NotFound, ValidationError
from .images import FormatError, generate_body, pack_image, unpack_image, unpack_parts


class InstallStatus(str, enum.Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"


@dataclass(frozen=True)
class InstallerOutcome:
    status: InstallStatus
    detail: str = ""
    duration_ms: int = 0

    @property
    def ok(self) -> bool:
        return self.status is InstallStatus.SUCCESS


# fault type -> pipeline stage at which it fires
FAULT_STAGES = {
    "download": "download",
    "corrupt": "download",
    "install": "install",
    "probe": "install",
}


@dataclass(frozen=True)
class Fault:
    slot: str
    type: str
    attempt: int = 1
    position: int = 0

    def __post_init__(self) -> None:
        if self.type not in FAULT_STAGES:
            raise ValidationError(f"unknown fault type {self.type!r}")
        if self.attempt < 1:
            raise ValidationError("fault attempt numbers start at 1")

    @property
    def stage(self) -> str:
        return FAULT_STAGES[self.type]

    def to_dict(self) -> dict:
        return {"slot": self.slot, "type": self.type, "attempt": self.attempt, "position": self.position}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Fault":
        return cls(data["slot"], data["type"], int(data.get("attempt", 1)), int(data.get("position", 0)))


class FaultInjector:
    """Deterministic fault schedule keyed by (slot, stage, attempt number).

    ``rate`` adds seeded random install failures on top of the schedule.
    """

    def __init__(self, faults: Iterable[Fault] = (), seed: int = 0, rate: float = 0.0):
        self._faults = {(f.slot, f.stage, f.attempt): f for f in faults}
        self._attempts: dict[tuple, int] = {}
        self._rng = random.Random(seed)
        self.rate = rate

    def next(self, slot: str, stage: str) -> Optional[Fault]:
        key = (slot, stage)
        attempt = self._attempts.get(key, 0) + 1
        self._attempts[key] = attempt
        fault = self._faults.get((slot, stage, attempt))
        if fault is None and stage == "install" and self.rate > 0 and self._rng.random() < self.rate:
            fault = Fault(slot, "install", attempt)
        return fault


def _duration(payload: bytes, base_ms: int) -> int:
    return base_ms + len(payload) // 1024


class SimulatedDevice:
    """In-memory hardware of one vehicle.

    ``state`` is a plain dict so snapshots compare with ``==``::

        {"firmware":   {slot: {"version", "hardware_version", "image"}},
         "containers": {slot: {"version", "image", "running", "model"}},
         "models":     {slot: {"version", "blob", "model"}}}
    """

    def __init__(self, state: Mapping[str, Any], faults: Optional[FaultInjector] = None):
        self.state = copy.deepcopy(dict(state))
        self.inactive: dict[str, tuple] = {}
        self.faults = faults or FaultInjector()

    @classmethod
    def from_profile(cls, profile: VehicleProfile, faults: Optional[FaultInjector] = None) -> "SimulatedDevice":
        def image(slot: str, version: SemanticVersion) -> bytes:
            return pack_image(version, generate_body(64, f"{profile.vehicle_id}/{slot}/factory"))

        state = {
            "firmware": {
                e.slot_name: {
                    "version": str(e.installed_firmware),
                    "hardware_version": str(e.hardware_version),
                    "image": image(e.slot_name, e.installed_firmware),
                }
                for e in profile.ecus
            },
            "containers": {
                slot: {"version": str(ref.version), "image": image(slot, ref.version), "running": True, "model": None}
                for slot, ref in profile.installed_services.items()
            },
            "models": {
                slot: {"version": str(ref.version), "blob": image(slot, ref.version), "model": None}
                for slot, ref in profile.installed_models.items()
            },
        }
        return cls(state, faults)

    def snapshot(self) -> dict:
        return copy.deepcopy(self.state)

    def _section(self, kind: ArtifactKind) -> dict:
        return self.state[
            {
                ArtifactKind.FIRMWARE_BINARY: "firmware",
                ArtifactKind.CONTAINER_IMAGE: "containers",
                ArtifactKind.AI_MODEL: "models",
            }[kind]
        ]

    def kind_of(self, slot: str) -> ArtifactKind:
        for kind in ArtifactKind:
            if slot in self._section(kind):
                return kind
        raise NotFound(f"device has no slot {slot!r}")

    def version(self, slot: str) -> str:
        return self._section(self.kind_of(slot))[slot]["version"]

    def _swap_in(self, kind: ArtifactKind, slot: str, entry: dict) -> None:
        section = self._section(kind)
        self.inactive[slot] = (kind, section[slot])
        section[slot] = entry

    # -- installers -----------------------------------------------------

    def _fault(self, slot: str, *types: str) -> Optional[Fault]:
        fault = self.faults.next(slot, "install")
        return fault if fault is not None and fault.type in types else None

    def flash_firmware(self, slot: str, payload: bytes, to_version: SemanticVersion) -> InstallerOutcome:
        entry = self.state["firmware"].get(slot)
        if entry is None:
            return InstallerOutcome(InstallStatus.FAILURE, f"no ECU slot {slot!r}")
        fault = self._fault(slot, "install", "probe")
        if not payload:
            return InstallerOutcome(InstallStatus.FAILURE, "empty image")
        if fault is not None:
            return InstallerOutcome(InstallStatus.FAILURE, "flash fault injected", _duration(payload, 200))
        self._swap_in(
            ArtifactKind.FIRMWARE_BINARY,
            slot,
            {"version": str(to_version), "hardware_version": entry["hardware_version"], "image": payload},
        )
        return InstallerOutcome(InstallStatus.SUCCESS, "flashed", _duration(payload, 200))

    @staticmethod
    def _probe(image_bytes: bytes, to_version: SemanticVersion) -> Optional[str]:
        try:
            image = unpack_image(image_bytes)
        except FormatError as exc:
            return f"health probe failed: {exc}"
        if image.version != to_version:
            return f"health probe failed: image reports {image.version}, expected {to_version}"
        return None

    def deploy_container(
        self,
        slot: str,
        payload: bytes,
        to_version: SemanticVersion,
        model: Optional[Mapping[str, Any]] = None,
    ) -> InstallerOutcome:
        if model is not None:
            return self.mount_model(slot, payload, to_version, model)
        entry = self.state["containers"].get(slot)
        if entry is None:
            return InstallerOutcome(InstallStatus.FAILURE, f"no service slot {slot!r}")
        fault = self._fault(slot, "install", "probe")
        if entry["version"] == str(to_version) and entry["image"] == payload:
            return InstallerOutcome(InstallStatus.SUCCESS, "already running", 0)
        problem = self._probe(payload, to_version)
        if problem is None and fault is not None:
            problem = f"health probe failed: {fault.type} fault injected"
        if problem is not None:
            # the new image was started and failed its probe; the old one keeps serving
            return InstallerOutcome(InstallStatus.FAILURE, problem + "; reverted", _duration(payload, 500))
        self._swap_in(
            ArtifactKind.CONTAINER_IMAGE,
            slot,
            {"version": str(to_version), "image": payload, "running": True, "model": entry.get("model")},
        )
        return InstallerOutcome(InstallStatus.SUCCESS, "service restarted", _duration(payload, 500))

    def mount_model(
        self,
        slot: str,
        payload: bytes,
        to_version: SemanticVersion,
        model: Optional[Mapping[str, Any]] = None,
    ) -> InstallerOutcome:
        """Mount a model, either into a model slot or inside a composed container."""
        fault = self._fault(slot, "install", "probe")
        model_record = None if model is None else copy.deepcopy(dict(model))
        if slot in self.state["models"]:
            if not payload:
                return InstallerOutcome(InstallStatus.FAILURE, "empty model blob")
            if fault is not None:
                return InstallerOutcome(InstallStatus.FAILURE, "mount fault injected", _duration(payload, 100))
            self._swap_in(
                ArtifactKind.AI_MODEL, slot, {"version": str(to_version), "blob": payload, "model": model_record}
            )
            return InstallerOutcome(InstallStatus.SUCCESS, "model mounted", _duration(payload, 100))
        if slot in self.state["containers"]:
            try:
                container_part, model_part = unpack_parts(payload)
            except FormatError as exc:
                return InstallerOutcome(InstallStatus.FAILURE, f"cannot split composed payload: {exc}")
            problem = self._probe(container_part, to_version)
            if problem is None and not model_part:
                problem = "composed payload carries an empty model part"
            if problem is None and fault is not None:
                problem = f"health probe failed: {fault.type} fault injected"
            if problem is not None:
                return InstallerOutcome(InstallStatus.FAILURE, problem + "; reverted", _duration(payload, 600))
            self._swap_in(
                ArtifactKind.CONTAINER_IMAGE,
                slot,
                {"version": str(to_version), "image": payload, "running": True, "model": model_record},
            )
            return InstallerOutcome(InstallStatus.SUCCESS, "container restarted with model", _duration(payload, 600))
        return InstallerOutcome(InstallStatus.FAILURE, f"no model or service slot {slot!r}")

    def install(
        self,
        kind: ArtifactKind,
        slot: str,
        payload: bytes,
        to_version: SemanticVersion,
        model: Optional[Mapping[str, Any]] = None,
    ) -> InstallerOutcome:
        if kind is ArtifactKind.FIRMWARE_BINARY:
            return self.flash_firmware(slot, payload, to_version)
        if kind is ArtifactKind.CONTAINER_IMAGE:
            return self.deploy_container(slot, payload, to_version, model)
        if kind is ArtifactKind.AI_MODEL:
            return self.mount_model(slot, payload, to_version, model)
        raise ValueError(f"no installer for {kind!r}")

    # -- A/B fallback ---------------------------------------------------

    def activate_previous(self, slot: str) -> dict:
        """Switch ``slot`` back to its inactive bank; the depth is one image."""
        if slot not in self.inactive:
            raise NotFound(f"no previous image for slot {slot!r}")
        kind, entry = self.inactive.pop(slot)
        self._section(kind)[slot] = entry
        return entry

    # -- inspection -----------------------------------------------------

    def model_info(self, slot: str) -> Optional[dict]:
        kind = self.kind_of(slot)
        if kind is ArtifactKind.FIRMWARE_BINARY:
            return None
        return self._section(kind)[slot].get("model")

    def detectable_classes(self, slot: str) -> list[str]:
        info = self.model_info(slot) or {}
        meta = info.get("meta") or {}
        return list(meta.get("detectable_classes") or ())

    def describe(self) -> dict:
        """JSON-friendly view without image bytes."""
        out: dict = {}
        for section, entries in self.state.items():
            out[section] = {
                slot: {k: (len(v) if isinstance(v, bytes) else v) for k, v in entry.items()}
                for slot, entry in entries.items()
            }
        return out

    def dump(self, directory: str | Path) -> Path:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        target = path / "device.json"
        target.write_text(json.dumps(self.describe(), indent=2, sort_keys=True))
        return target
