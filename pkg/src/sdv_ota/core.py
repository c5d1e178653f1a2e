"""Domain values shared by every layer: versions, digests, artifacts, vehicles.

All types are frozen dataclasses. Each one knows how to turn itself into a
plain JSON-compatible dict (``to_dict``) and back (``from_dict``); these dicts
are the wire and file representation used everywhere else.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional

from .errors import DigestError, ValidationError, VersionError

_VERSION_RE = re.compile(r"^(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)$")
_HEX_RE = re.compile(r"^[0-9a-f]{64}$")

DIGEST_ALGORITHM = "sha256"


@dataclass(frozen=True, order=True)
class SemanticVersion:
    major: int
    minor: int
    patch: int

    def __post_init__(self) -> None:
        for part in (self.major, self.minor, self.patch):
            if not isinstance(part, int) or isinstance(part, bool) or part < 0:
                raise VersionError(f"version components must be non-negative integers, got {part!r}")

    def __str__(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"

    @classmethod
    def parse(cls, text: str) -> "SemanticVersion":
        return parse_version(text)


ZERO_VERSION = SemanticVersion(0, 0, 0)


def parse_version(text: str) -> SemanticVersion:
    """Parse a strict ``major.minor.patch`` string.

    Leading zeros, pre-release and build suffixes are rejected so that
    ``str(parse_version(s)) == s`` for every accepted ``s``.
    """
    if not isinstance(text, str):
        raise VersionError(f"expected a string, got {type(text).__name__}")
    m = _VERSION_RE.match(text)
    if m is None:
        raise VersionError(f"malformed version {text!r}")
    return SemanticVersion(int(m.group(1)), int(m.group(2)), int(m.group(3)))


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def compare_versions(a: SemanticVersion, b: SemanticVersion) -> Ordering:
    ka = (a.major, a.minor, a.patch)
    kb = (b.major, b.minor, b.patch)
    if ka < kb:
        return Ordering.LESS
    if ka > kb:
        return Ordering.GREATER
    return Ordering.EQUAL


@dataclass(frozen=True)
class ContentDigest:
    hex: str
    algorithm: str = DIGEST_ALGORITHM

    def __post_init__(self) -> None:
        if self.algorithm != DIGEST_ALGORITHM:
            raise DigestError(f"unsupported digest algorithm {self.algorithm!r}")
        if not isinstance(self.hex, str) or not _HEX_RE.match(self.hex):
            raise DigestError(f"digest must be 64 lowercase hex characters, got {self.hex!r}")

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.hex}"

    @classmethod
    def parse(cls, text: str) -> "ContentDigest":
        algorithm, sep, hexpart = text.partition(":")
        if not sep:
            raise DigestError(f"digest must look like '<algorithm>:<hex>', got {text!r}")
        return cls(hex=hexpart, algorithm=algorithm)


def compute_digest(payload: bytes) -> ContentDigest:
    return ContentDigest(hashlib.sha256(payload).hexdigest())


class ArtifactKind(str, enum.Enum):
    FIRMWARE_BINARY = "FIRMWARE_BINARY"
    CONTAINER_IMAGE = "CONTAINER_IMAGE"
    AI_MODEL = "AI_MODEL"


@dataclass(frozen=True)
class ComponentSlot:
    name: str
    kind: ArtifactKind


@dataclass(frozen=True)
class Verdict:
    """Boolean result that carries the reason for a negative answer."""

    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = Verdict(True)


def _opt_version(text: Optional[str]) -> Optional[SemanticVersion]:
    return None if text is None else parse_version(text)


def _opt_str(version: Optional[SemanticVersion]) -> Optional[str]:
    return None if version is None else str(version)


@dataclass(frozen=True)
class HardwareRequirement:
    hardware_model: Optional[str] = None
    min_hardware_version: Optional[SemanticVersion] = None
    required_sensors: frozenset = frozenset()
    min_compute_tier: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_sensors", frozenset(self.required_sensors))
        if self.min_compute_tier is not None and self.min_compute_tier < 0:
            raise ValidationError("min_compute_tier must be non-negative")

    @property
    def is_empty(self) -> bool:
        return (
            self.hardware_model is None
            and self.min_hardware_version is None
            and not self.required_sensors
            and self.min_compute_tier is None
        )

    def merged(self, other: "HardwareRequirement") -> "HardwareRequirement":
        """Field-wise stricter of two requirements."""
        if (
            self.hardware_model is not None
            and other.hardware_model is not None
            and self.hardware_model != other.hardware_model
        ):
            raise ValidationError(
                f"conflicting hardware models {self.hardware_model!r} and {other.hardware_model!r}"
            )
        hw_versions = [v for v in (self.min_hardware_version, other.min_hardware_version) if v is not None]
        tiers = [t for t in (self.min_compute_tier, other.min_compute_tier) if t is not None]
        return HardwareRequirement(
            hardware_model=self.hardware_model if self.hardware_model is not None else other.hardware_model,
            min_hardware_version=max(hw_versions) if hw_versions else None,
            required_sensors=self.required_sensors | other.required_sensors,
            min_compute_tier=max(tiers) if tiers else None,
        )

    def to_dict(self) -> dict:
        return {
            "hardware_model": self.hardware_model,
            "min_hardware_version": _opt_str(self.min_hardware_version),
            "required_sensors": sorted(self.required_sensors),
            "min_compute_tier": self.min_compute_tier,
        }

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "HardwareRequirement":
        data = data or {}
        return cls(
            hardware_model=data.get("hardware_model"),
            min_hardware_version=_opt_version(data.get("min_hardware_version")),
            required_sensors=frozenset(data.get("required_sensors") or ()),
            min_compute_tier=data.get("min_compute_tier"),
        )


@dataclass(frozen=True)
class ModelMetadata:
    accuracy: float
    evaluation_dataset: str = ""
    detectable_classes: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "detectable_classes", tuple(self.detectable_classes))
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "evaluation_dataset": self.evaluation_dataset,
            "detectable_classes": list(self.detectable_classes),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelMetadata":
        return cls(
            accuracy=float(data["accuracy"]),
            evaluation_dataset=data.get("evaluation_dataset", ""),
            detectable_classes=tuple(data.get("detectable_classes") or ()),
        )


@dataclass(frozen=True)
class ArtifactRef:
    artifact_id: str
    version: SemanticVersion

    def __str__(self) -> str:
        return f"{self.artifact_id}@{self.version}"

    def to_dict(self) -> dict:
        return {"artifact_id": self.artifact_id, "version": str(self.version)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArtifactRef":
        return cls(data["artifact_id"], parse_version(data["version"]))


@dataclass(frozen=True)
class ArtifactDescriptor:
    artifact_id: str
    kind: ArtifactKind
    slot_name: str
    version: SemanticVersion
    digest: ContentDigest
    size_bytes: int
    requirement: HardwareRequirement = field(default_factory=HardwareRequirement)
    tags: Mapping[str, str] = field(default_factory=dict)
    model_meta: Optional[ModelMetadata] = None
    embedded_model: Optional[ArtifactRef] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ArtifactKind(self.kind))
        if not self.artifact_id:
            raise ValidationError("artifact_id must be non-empty")
        if self.size_bytes < 0:
            raise ValidationError("size_bytes must be non-negative")
        if (self.model_meta is not None) != (self.kind is ArtifactKind.AI_MODEL):
            raise ValidationError("model_meta is required for AI_MODEL artifacts and forbidden otherwise")
        if self.embedded_model is not None and self.kind is not ArtifactKind.CONTAINER_IMAGE:
            raise ValidationError("only CONTAINER_IMAGE artifacts may embed a model")

    @property
    def ref(self) -> ArtifactRef:
        return ArtifactRef(self.artifact_id, self.version)

    def to_dict(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "kind": self.kind.value,
            "slot_name": self.slot_name,
            "version": str(self.version),
            "digest": str(self.digest),
            "size_bytes": self.size_bytes,
            "requirement": self.requirement.to_dict(),
            "tags": dict(sorted(self.tags.items())),
            "model_meta": None if self.model_meta is None else self.model_meta.to_dict(),
            "embedded_model": None if self.embedded_model is None else self.embedded_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArtifactDescriptor":
        meta = data.get("model_meta")
        embedded = data.get("embedded_model")
        return cls(
            artifact_id=data["artifact_id"],
            kind=ArtifactKind(data["kind"]),
            slot_name=data["slot_name"],
            version=parse_version(data["version"]),
            digest=ContentDigest.parse(data["digest"]),
            size_bytes=int(data["size_bytes"]),
            requirement=HardwareRequirement.from_dict(data.get("requirement")),
            tags=dict(data.get("tags") or {}),
            model_meta=None if meta is None else ModelMetadata.from_dict(meta),
            embedded_model=None if embedded is None else ArtifactRef.from_dict(embedded),
        )


@dataclass(frozen=True)
class EcuDescriptor:
    slot_name: str
    hardware_version: SemanticVersion
    installed_firmware: SemanticVersion
    hardware_model: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "slot_name": self.slot_name,
            "hardware_version": str(self.hardware_version),
            "installed_firmware": str(self.installed_firmware),
            "hardware_model": self.hardware_model,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EcuDescriptor":
        return cls(
            slot_name=data["slot_name"],
            hardware_version=parse_version(data["hardware_version"]),
            installed_firmware=parse_version(data["installed_firmware"]),
            hardware_model=data.get("hardware_model"),
        )


def _installed_to_dict(entries: Mapping[str, ArtifactRef]) -> dict:
    return {slot: ref.to_dict() for slot, ref in entries.items()}


def _installed_from_dict(data: Optional[Mapping[str, Any]]) -> dict:
    return {slot: ArtifactRef.from_dict(ref) for slot, ref in (data or {}).items()}


@dataclass(frozen=True)
class VehicleProfile:
    """A vehicle's variant, hardware inventory and installed software.

    ``installed_services`` and ``installed_models`` map slot names to the
    artifact currently occupying the slot. ``platform`` names the in-vehicle
    compute node and counts as a hardware identifier alongside ECU models.
    """

    vehicle_id: str
    variant_id: str
    ecus: tuple = ()
    compute_tier: int = 0
    sensors: frozenset = frozenset()
    installed_services: Mapping[str, ArtifactRef] = field(default_factory=dict)
    installed_models: Mapping[str, ArtifactRef] = field(default_factory=dict)
    platform: Optional[str] = None
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ecus", tuple(self.ecus))
        object.__setattr__(self, "sensors", frozenset(self.sensors))
        if self.compute_tier < 0:
            raise ValidationError("compute_tier must be non-negative")
        names = [e.slot_name for e in self.ecus] + list(self.installed_services) + list(self.installed_models)
        if len(names) != len(set(names)):
            raise ValidationError(f"slot names must be unique within vehicle {self.vehicle_id!r}")

    def slots(self) -> dict[str, ComponentSlot]:
        out = {e.slot_name: ComponentSlot(e.slot_name, ArtifactKind.FIRMWARE_BINARY) for e in self.ecus}
        out.update({s: ComponentSlot(s, ArtifactKind.CONTAINER_IMAGE) for s in self.installed_services})
        out.update({s: ComponentSlot(s, ArtifactKind.AI_MODEL) for s in self.installed_models})
        return out

    def ecu(self, slot_name: str) -> Optional[EcuDescriptor]:
        for e in self.ecus:
            if e.slot_name == slot_name:
                return e
        return None

    def installed_version(self, slot_name: str) -> SemanticVersion:
        ecu = self.ecu(slot_name)
        if ecu is not None:
            return ecu.installed_firmware
        if slot_name in self.installed_services:
            return self.installed_services[slot_name].version
        if slot_name in self.installed_models:
            return self.installed_models[slot_name].version
        raise KeyError(slot_name)

    def installed_state(self) -> dict[str, str]:
        """Slot name to rendered installed version, in slot order."""
        return {name: str(self.installed_version(name)) for name in self.slots()}

    def hardware_ids(self) -> set[str]:
        ids = {e.hardware_model for e in self.ecus if e.hardware_model}
        if self.platform:
            ids.add(self.platform)
        return ids

    def with_installed(
        self, slot_name: str, version: SemanticVersion, artifact_id: Optional[str] = None
    ) -> "VehicleProfile":
        """Copy of the profile with one slot moved to ``version``.

        ECU hardware versions are carried over unchanged.
        """
        if self.ecu(slot_name) is not None:
            ecus = tuple(
                replace(e, installed_firmware=version) if e.slot_name == slot_name else e for e in self.ecus
            )
            return replace(self, ecus=ecus)
        for attr in ("installed_services", "installed_models"):
            entries = getattr(self, attr)
            if slot_name in entries:
                updated = dict(entries)
                updated[slot_name] = ArtifactRef(artifact_id or entries[slot_name].artifact_id, version)
                return replace(self, **{attr: updated})
        raise KeyError(slot_name)

    def with_state(self, state: Mapping[str, str]) -> "VehicleProfile":
        """Apply a reported ``slot -> version`` map; unknown slots are ignored."""
        profile = self
        known = self.slots()
        for slot, text in state.items():
            if slot in known:
                version = parse_version(text)
                if version != profile.installed_version(slot):
                    profile = profile.with_installed(slot, version)
        return profile

    def to_dict(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "variant_id": self.variant_id,
            "ecus": [e.to_dict() for e in self.ecus],
            "compute_tier": self.compute_tier,
            "sensors": sorted(self.sensors),
            "installed_services": _installed_to_dict(self.installed_services),
            "installed_models": _installed_to_dict(self.installed_models),
            "platform": self.platform,
            "tags": dict(sorted(self.tags.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VehicleProfile":
        return cls(
            vehicle_id=data["vehicle_id"],
            variant_id=data["variant_id"],
            ecus=tuple(EcuDescriptor.from_dict(e) for e in data.get("ecus") or ()),
            compute_tier=int(data.get("compute_tier", 0)),
            sensors=frozenset(data.get("sensors") or ()),
            installed_services=_installed_from_dict(data.get("installed_services")),
            installed_models=_installed_from_dict(data.get("installed_models")),
            platform=data.get("platform"),
            tags=dict(data.get("tags") or {}),
        )


def requirement_matches(
    req: HardwareRequirement, profile: VehicleProfile, slot_name: Optional[str] = None
) -> Verdict:
    """Check a hardware requirement against a vehicle.

    ``min_hardware_version`` is compared with the hardware version of the
    target ECU named by ``slot_name``; a requirement that sets it can only be
    met by an ECU slot.
    """
    if req.hardware_model is not None and req.hardware_model not in profile.hardware_ids():
        return Verdict(False, f"hardware_model {req.hardware_model!r} not present")
    if req.min_hardware_version is not None:
        ecu = profile.ecu(slot_name) if slot_name is not None else None
        if ecu is None:
            return Verdict(False, "min_hardware_version: target slot has no hardware version")
        if ecu.hardware_version < req.min_hardware_version:
            return Verdict(
                False,
                f"min_hardware_version {req.min_hardware_version} > {ecu.hardware_version}",
            )
    missing = req.required_sensors - profile.sensors
    if missing:
        return Verdict(False, f"required_sensors missing {sorted(missing)}")
    if req.min_compute_tier is not None and req.min_compute_tier > profile.compute_tier:
        return Verdict(False, f"compute_tier {profile.compute_tier} < required {req.min_compute_tier}")
    return ACCEPT

