"""Variant-aware compatibility checks and manifest resolution."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .core import (
    ArtifactDescriptor,
    ArtifactRef,
    ContentDigest,
    SemanticVersion,
    Verdict,
    VehicleProfile,
    parse_version,
    requirement_matches,
)
from .errors import ResolutionError, ValidationError


@dataclass(frozen=True)
class VersionRange:
    min_inclusive: Optional[SemanticVersion] = None
    max_inclusive: Optional[SemanticVersion] = None

    def contains(self, version: SemanticVersion) -> bool:
        if self.min_inclusive is not None and version < self.min_inclusive:
            return False
        if self.max_inclusive is not None and version > self.max_inclusive:
            return False
        return True


@dataclass(frozen=True)
class VersionConstraint:
    ranges: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranges", tuple(self.ranges))
        if not self.ranges:
            raise ValidationError("a version constraint needs at least one range")

    @classmethod
    def at_most(cls, version: str) -> "VersionConstraint":
        return cls((VersionRange(None, parse_version(version)),))

    def satisfied_by(self, version: SemanticVersion) -> bool:
        return any(r.contains(version) for r in self.ranges)

    def to_list(self) -> list:
        return [
            {
                "min": None if r.min_inclusive is None else str(r.min_inclusive),
                "max": None if r.max_inclusive is None else str(r.max_inclusive),
            }
            for r in self.ranges
        ]

    @classmethod
    def from_list(cls, items: Sequence[Mapping[str, Any]]) -> "VersionConstraint":
        ranges = []
        for item in items:
            lo, hi = item.get("min"), item.get("max")
            ranges.append(
                VersionRange(
                    None if lo is None else parse_version(lo),
                    None if hi is None else parse_version(hi),
                )
            )
        return cls(tuple(ranges))


@dataclass(frozen=True)
class DependencyMatrix:
    """variant_id -> slot_name -> constraint. A missing pair denies deployment."""

    entries: Mapping[str, Mapping[str, VersionConstraint]] = field(default_factory=dict)

    def constraint_for(self, variant_id: str, slot_name: str) -> Optional[VersionConstraint]:
        return self.entries.get(variant_id, {}).get(slot_name)

    def to_dict(self) -> dict:
        return {
            variant: {slot: c.to_list() for slot, c in sorted(slots.items())}
            for variant, slots in sorted(self.entries.items())
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DependencyMatrix":
        return cls(
            {
                variant: {slot: VersionConstraint.from_list(ranges) for slot, ranges in slots.items()}
                for variant, slots in data.items()
            }
        )

    @classmethod
    def load(cls, path: str | Path) -> "DependencyMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Direction(str, enum.Enum):
    UPGRADE = "UPGRADE"
    ROLLBACK = "ROLLBACK"


@dataclass(frozen=True)
class UpdateAction:
    slot_name: str
    artifact_id: str
    from_version: SemanticVersion
    to_version: SemanticVersion
    digest: ContentDigest
    size_bytes: int
    direction: Direction
    # Set for AI_MODEL artifacts and for containers that embed a model so the
    # target can record what it mounted.
    model: Optional[Mapping[str, Any]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.direction is Direction.UPGRADE and not self.to_version > self.from_version:
            raise ValidationError(f"UPGRADE on {self.slot_name!r} must increase the version")
        if self.direction is Direction.ROLLBACK and not self.to_version < self.from_version:
            raise ValidationError(f"ROLLBACK on {self.slot_name!r} must decrease the version")

    def to_dict(self, download_url: Optional[str] = None) -> dict:
        out = {
            "slot": self.slot_name,
            "artifact_id": self.artifact_id,
            "from": str(self.from_version),
            "to": str(self.to_version),
            "digest": str(self.digest),
            "size": self.size_bytes,
            "direction": self.direction.value,
            "download_url": download_url if download_url is not None else blob_url(self.digest),
        }
        if self.model is not None:
            out["model"] = dict(self.model)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UpdateAction":
        return cls(
            slot_name=data["slot"],
            artifact_id=data["artifact_id"],
            from_version=parse_version(data["from"]),
            to_version=parse_version(data["to"]),
            digest=ContentDigest.parse(data["digest"]),
            size_bytes=int(data["size"]),
            direction=Direction(data["direction"]),
            model=data.get("model"),
        )


def blob_url(digest: ContentDigest) -> str:
    return f"/api/v1/blobs/{digest.hex}"


@dataclass(frozen=True)
class UpdateManifest:
    vehicle_id: str
    manifest_id: str
    actions: tuple = ()
    created_at: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        slots = [a.slot_name for a in self.actions]
        if len(slots) != len(set(slots)):
            raise ValidationError("a manifest may carry at most one action per slot")

    @property
    def is_empty(self) -> bool:
        return not self.actions

    def to_dict(self) -> dict:
        return {
            "manifest_id": self.manifest_id,
            "vehicle_id": self.vehicle_id,
            "created_at": self.created_at,
            "actions": [a.to_dict() for a in self.actions],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UpdateManifest":
        return cls(
            vehicle_id=data["vehicle_id"],
            manifest_id=data["manifest_id"],
            actions=tuple(UpdateAction.from_dict(a) for a in data.get("actions") or ()),
            created_at=int(data.get("created_at", 0)),
        )


def check_compatibility(
    artifact: ArtifactDescriptor, profile: VehicleProfile, matrix: DependencyMatrix
) -> Verdict:
    slot = profile.slots().get(artifact.slot_name)
    if slot is None:
        return Verdict(False, f"unknown slot {artifact.slot_name!r}")
    if slot.kind is not artifact.kind:
        return Verdict(False, f"kind mismatch: slot is {slot.kind.value}, artifact is {artifact.kind.value}")
    constraint = matrix.constraint_for(profile.variant_id, artifact.slot_name)
    if constraint is None:
        return Verdict(False, f"matrix constraint: no entry for ({profile.variant_id}, {artifact.slot_name})")
    if not constraint.satisfied_by(artifact.version):
        return Verdict(False, f"matrix constraint: {artifact.version} not allowed for {profile.variant_id}")
    verdict = requirement_matches(artifact.requirement, profile, artifact.slot_name)
    if not verdict:
        return Verdict(False, f"hardware requirement: {verdict.reason}")
    return verdict


def select_best(candidates: Sequence[ArtifactDescriptor]) -> ArtifactDescriptor:
    """Highest version wins; equal versions go to the smallest artifact_id."""
    if not candidates:
        raise ResolutionError("select_best needs at least one candidate")
    slots = {c.slot_name for c in candidates}
    if len(slots) > 1:
        raise ResolutionError(f"candidates target several slots: {sorted(slots)}")
    best = candidates[0]
    for c in candidates[1:]:
        if c.version > best.version or (c.version == best.version and c.artifact_id < best.artifact_id):
            best = c
    return best


def model_info(artifact: ArtifactDescriptor, catalog: Iterable[ArtifactDescriptor]) -> Optional[dict]:
    """What the target needs to know about the model an action carries."""
    if artifact.model_meta is not None:
        return {"artifact_id": artifact.artifact_id, "version": str(artifact.version), "meta": artifact.model_meta.to_dict()}
    if artifact.embedded_model is not None:
        ref = artifact.embedded_model
        for a in catalog:
            if a.ref == ref and a.model_meta is not None:
                return {"artifact_id": ref.artifact_id, "version": str(ref.version), "meta": a.model_meta.to_dict()}
        return {"artifact_id": ref.artifact_id, "version": str(ref.version), "meta": None}
    return None


def _manifest_id(vehicle_id: str, actions: Sequence[UpdateAction]) -> str:
    body = json.dumps([vehicle_id] + [a.to_dict() for a in actions], sort_keys=True)
    return "m-" + hashlib.sha256(body.encode()).hexdigest()[:16]


def _build_action(
    artifact: ArtifactDescriptor, current: SemanticVersion, direction: Direction, catalog: Sequence[ArtifactDescriptor]
) -> UpdateAction:
    return UpdateAction(
        slot_name=artifact.slot_name,
        artifact_id=artifact.artifact_id,
        from_version=current,
        to_version=artifact.version,
        digest=artifact.digest,
        size_bytes=artifact.size_bytes,
        direction=direction,
        model=model_info(artifact, catalog),
    )


def resolve_updates(
    profile: VehicleProfile,
    catalog: Sequence[ArtifactDescriptor],
    matrix: DependencyMatrix,
    *,
    manifest_id: Optional[str] = None,
    created_at: int = 0,
) -> UpdateManifest:
    actions = []
    for slot_name in profile.slots():
        compatible = [
            a for a in catalog if a.slot_name == slot_name and check_compatibility(a, profile, matrix)
        ]
        if not compatible:
            continue
        best = select_best(compatible)
        current = profile.installed_version(slot_name)
        if best.version > current:
            actions.append(_build_action(best, current, Direction.UPGRADE, catalog))
    return UpdateManifest(
        vehicle_id=profile.vehicle_id,
        manifest_id=manifest_id or _manifest_id(profile.vehicle_id, actions),
        actions=tuple(actions),
        created_at=created_at,
    )


def resolve_rollback(
    profile: VehicleProfile,
    pins: Mapping[tuple, SemanticVersion],
    catalog: Sequence[ArtifactDescriptor],
    *,
    manifest_id: Optional[str] = None,
    created_at: int = 0,
) -> UpdateManifest:
    """Restore every pinned slot of this vehicle's variant to its pinned version.

    ``pins`` is keyed by ``(variant_id, slot_name)``. A pin above the installed
    version produces an UPGRADE-direction action inside the rollback manifest.
    """
    slots = profile.slots()
    actions = []
    for slot_name in slots:
        pinned = pins.get((profile.variant_id, slot_name))
        if pinned is None:
            continue
        current = profile.installed_version(slot_name)
        candidates = [
            a for a in catalog
            if a.slot_name == slot_name and a.version == pinned and a.kind is slots[slot_name].kind
        ]
        if not candidates:
            raise ResolutionError(f"rollback pin ({slot_name}, {pinned}) has no artifact in the catalog")
        if pinned == current:
            continue
        direction = Direction.ROLLBACK if pinned < current else Direction.UPGRADE
        actions.append(_build_action(select_best(candidates), current, direction, catalog))
    return UpdateManifest(
        vehicle_id=profile.vehicle_id,
        manifest_id=manifest_id or _manifest_id(profile.vehicle_id, actions),
        actions=tuple(actions),
        created_at=created_at,
    )


def apply_manifest(profile: VehicleProfile, manifest: UpdateManifest) -> VehicleProfile:
    """Profile as it would look after every action of ``manifest`` succeeded."""
    for action in manifest.actions:
        profile = profile.with_installed(action.slot_name, action.to_version, action.artifact_id)
    return profile

