"""Cloud-side OTA middleware: fleet ledger, rollout campaigns, manifest issuing.

All mutable state lives in :class:`CloudService` and every public method runs
under one lock, so campaign evaluation always sees a consistent snapshot no
matter how many protocol requests arrive concurrently.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .core import ArtifactDescriptor, ArtifactRef, SemanticVersion, VehicleProfile, parse_version
from .errors import Conflict, NotFound, ResolutionError, ValidationError
from .resolver import DependencyMatrix, UpdateManifest, resolve_rollback, resolve_updates
from .store import ArtifactStore

log = logging.getLogger(__name__)

_EPS = 1e-9


class RolloutMode(str, enum.Enum):
    FULL = "FULL"
    STAGED = "STAGED"
    CANARY = "CANARY"


@dataclass(frozen=True)
class RolloutStrategy:
    mode: RolloutMode = RolloutMode.FULL
    wave_fractions: tuple = (1.0,)
    health_threshold: float = 1.0
    wave_timeout_ms: int = 120_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RolloutMode(self.mode))
        fractions = tuple(float(f) for f in self.wave_fractions)
        object.__setattr__(self, "wave_fractions", fractions)
        if not fractions:
            raise ValidationError("wave_fractions must not be empty")
        if any(not (0.0 < f <= 1.0) for f in fractions):
            raise ValidationError("every wave fraction must lie in (0, 1]")
        if abs(sum(fractions) - 1.0) > 1e-6:
            raise ValidationError(f"wave fractions must cover the fleet exactly, got sum {sum(fractions)}")
        if self.mode is RolloutMode.FULL and fractions != (1.0,):
            raise ValidationError("FULL rollouts use a single wave of 1.0")
        if self.mode is RolloutMode.CANARY and len(fractions) < 2:
            raise ValidationError("CANARY rollouts need a canary wave followed by at least one more")
        if not 0.0 <= self.health_threshold <= 1.0:
            raise ValidationError("health_threshold must lie in [0, 1]")
        if self.wave_timeout_ms <= 0:
            raise ValidationError("wave_timeout_ms must be positive")

    @classmethod
    def full(cls, **kw) -> "RolloutStrategy":
        return cls(RolloutMode.FULL, (1.0,), **kw)

    @classmethod
    def canary(cls, fraction: float, **kw) -> "RolloutStrategy":
        return cls(RolloutMode.CANARY, (fraction, 1.0 - fraction), **kw)

    @classmethod
    def staged(cls, fractions: Sequence[float], **kw) -> "RolloutStrategy":
        return cls(RolloutMode.STAGED, tuple(fractions), **kw)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "wave_fractions": list(self.wave_fractions),
            "health_threshold": self.health_threshold,
            "wave_timeout_ms": self.wave_timeout_ms,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RolloutStrategy":
        mode = RolloutMode(data.get("mode", "FULL"))
        kw = {}
        if "health_threshold" in data:
            kw["health_threshold"] = float(data["health_threshold"])
        if "wave_timeout_ms" in data:
            kw["wave_timeout_ms"] = int(data["wave_timeout_ms"])
        if "wave_fractions" in data:
            return cls(mode, tuple(data["wave_fractions"]), **kw)
        if mode is RolloutMode.CANARY:
            return cls.canary(float(data.get("canary_fraction", 0.1)), **kw)
        if mode is RolloutMode.STAGED:
            raise ValidationError("STAGED rollouts need explicit wave_fractions")
        return cls.full(**kw)


def wave_sizes(fractions: Sequence[float], fleet_size: int) -> list[int]:
    """ceil(fraction * fleet) per wave; the last wave takes whatever is left."""
    sizes = []
    remaining = fleet_size
    for f in fractions[:-1]:
        n = min(remaining, math.ceil(f * fleet_size - _EPS))
        sizes.append(n)
        remaining -= n
    sizes.append(remaining)
    return sizes


def assign_waves(campaign_id: str, vehicle_ids: Iterable[str], fractions: Sequence[float]) -> list[list[str]]:
    """Deterministic partition of vehicles into waves.

    Vehicles are ordered by a hash of ``campaign_id`` and their id, so the
    canary set differs between campaigns but never between runs.
    """
    ordered = sorted(
        set(vehicle_ids), key=lambda v: (hashlib.sha256(f"{campaign_id}\x00{v}".encode()).hexdigest(), v)
    )
    waves, pos = [], 0
    for n in wave_sizes(fractions, len(ordered)):
        waves.append(ordered[pos : pos + n])
        pos += n
    return waves


@dataclass(frozen=True)
class TargetFilter:
    variants: Optional[tuple] = None
    vehicles: Optional[tuple] = None
    tags: Mapping[str, str] = field(default_factory=dict)

    def matches(self, profile: VehicleProfile) -> bool:
        if self.variants is not None and profile.variant_id not in self.variants:
            return False
        if self.vehicles is not None and profile.vehicle_id not in self.vehicles:
            return False
        return all(profile.tags.get(k) == v for k, v in self.tags.items())

    def to_dict(self) -> dict:
        return {
            "variants": None if self.variants is None else list(self.variants),
            "vehicles": None if self.vehicles is None else list(self.vehicles),
            "tags": dict(self.tags),
        }

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "TargetFilter":
        data = data or {}
        variants, vehicles = data.get("variants"), data.get("vehicles")
        return cls(
            None if variants is None else tuple(variants),
            None if vehicles is None else tuple(vehicles),
            dict(data.get("tags") or {}),
        )


class CampaignState(str, enum.Enum):
    PENDING = "PENDING"
    WAVE_ACTIVE = "WAVE_ACTIVE"
    COMPLETED = "COMPLETED"
    ABORTED_ROLLING_BACK = "ABORTED_ROLLING_BACK"
    ABORTED = "ABORTED"


ACTIVE_STATES = (CampaignState.PENDING, CampaignState.WAVE_ACTIVE, CampaignState.ABORTED_ROLLING_BACK)


class VehicleStatus(str, enum.Enum):
    PENDING = "PENDING"
    OFFERED = "OFFERED"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    ROLLED_BACK = "ROLLED_BACK"


class Outcome(str, enum.Enum):
    SUCCEEDED = "SUCCEEDED"
    FAILED_DOWNLOAD = "FAILED_DOWNLOAD"
    FAILED_INTEGRITY = "FAILED_INTEGRITY"
    FAILED_INSTALL = "FAILED_INSTALL"


@dataclass(frozen=True)
class ActionOutcome:
    status: Outcome
    from_version: SemanticVersion
    resulting_version: SemanticVersion

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "from": str(self.from_version),
            "resulting": str(self.resulting_version),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ActionOutcome":
        return cls(Outcome(data["status"]), parse_version(data["from"]), parse_version(data["resulting"]))


@dataclass(frozen=True)
class InstallReport:
    vehicle_id: str
    manifest_id: str
    outcomes: Mapping[str, ActionOutcome]
    digest_verified: bool
    timestamp: int = 0
    detail: str = ""

    @property
    def all_succeeded(self) -> bool:
        return all(o.status is Outcome.SUCCEEDED for o in self.outcomes.values())

    def to_dict(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "manifest_id": self.manifest_id,
            "outcomes": {slot: o.to_dict() for slot, o in self.outcomes.items()},
            "digest_verified": self.digest_verified,
            "timestamp": self.timestamp,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InstallReport":
        return cls(
            vehicle_id=data["vehicle_id"],
            manifest_id=data["manifest_id"],
            outcomes={slot: ActionOutcome.from_dict(o) for slot, o in data.get("outcomes", {}).items()},
            digest_verified=bool(data.get("digest_verified", False)),
            timestamp=int(data.get("timestamp", 0)),
            detail=data.get("detail", ""),
        )


@dataclass
class FleetLedger:
    profiles: dict = field(default_factory=dict)
    last_seen: dict = field(default_factory=dict)
    report_history: list = field(default_factory=list)


@dataclass
class Campaign:
    campaign_id: str
    target_filter: TargetFilter
    strategy: RolloutStrategy
    catalog_scope: Optional[tuple]
    purpose: str  # "update" or "rollback"
    created_at: int
    state: CampaignState = CampaignState.PENDING
    wave_index: int = 0
    wave_started_at: int = 0
    waves: list = field(default_factory=list)
    status: dict = field(default_factory=dict)
    # vehicle -> {slot: version} captured the first time an update is offered
    pre_state: dict = field(default_factory=dict)
    # vehicle -> {(variant, slot): version} targets for the rollback phase
    rollback_pins: dict = field(default_factory=dict)
    unrestorable: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def membership(self) -> dict:
        return {v: i for i, wave in enumerate(self.waves) for v in wave}

    @property
    def vehicles(self) -> list:
        return [v for wave in self.waves for v in wave]

    @property
    def active(self) -> bool:
        return self.state in ACTIVE_STATES

    def slots(self) -> Optional[set]:
        if self.purpose == "rollback":
            slots = {slot for pins in self.rollback_pins.values() for (_, slot) in pins}
            return slots
        if self.catalog_scope is None:
            return None
        return {slot for (_, _, slot) in self.catalog_scope}

    def state_label(self) -> str:
        if self.state is CampaignState.WAVE_ACTIVE:
            return f"WAVE_ACTIVE({self.wave_index})"
        return self.state.value

    def to_dict(self) -> dict:
        return {
            "campaign_id": self.campaign_id,
            "purpose": self.purpose,
            "state": self.state.value,
            "state_label": self.state_label(),
            "wave_index": self.wave_index,
            "target_filter": self.target_filter.to_dict(),
            "strategy": self.strategy.to_dict(),
            "catalog_scope": None
            if self.catalog_scope is None
            else [{"artifact_id": a, "version": v} for (a, v, _) in self.catalog_scope],
            "waves": [list(w) for w in self.waves],
            "vehicle_status": {v: s.value for v, s in sorted(self.status.items())},
            "unrestorable": list(self.unrestorable),
            "history": list(self.history),
            "created_at": self.created_at,
        }


@dataclass
class _Issued:
    vehicle_id: str
    campaign_id: str
    purpose: str
    manifest: UpdateManifest
    basis: dict  # reported state the manifest was resolved against


def _wall_clock_ms() -> int:
    return int(time.time() * 1000)


class CloudService:
    """Owns the ledger and campaigns and answers the vehicle protocol.

    ``clock`` returns the current time in integer milliseconds; the simulator
    injects its own. ``listeners`` receive one dict per observable event.
    """

    def __init__(
        self,
        store: ArtifactStore,
        matrix: Optional[DependencyMatrix] = None,
        clock: Callable[[], int] = _wall_clock_ms,
    ):
        self.store = store
        self.matrix = matrix or DependencyMatrix()
        self.clock = clock
        self.ledger = FleetLedger()
        self.campaigns: dict[str, Campaign] = {}
        self.listeners: list[Callable[[dict], None]] = []
        self._issued: dict[str, _Issued] = {}
        self._outstanding: dict[tuple, str] = {}
        self._manifest_seq = 0
        self._campaign_seq = 0
        self._lock = threading.RLock()
        self._catalog: tuple[list, int] = ([], -1)

    # -- plumbing -------------------------------------------------------

    def _emit(self, event: str, **fields: Any) -> None:
        record = {"event": event, **fields}
        for listener in self.listeners:
            listener(record)

    def catalog(self) -> list[ArtifactDescriptor]:
        """Current store catalog, refreshed whenever the store revision moves."""
        if self._catalog[1] != self.store.revision:
            self._catalog = self.store.catalog()
        return self._catalog[0]

    def set_matrix(self, matrix: DependencyMatrix) -> None:
        with self._lock:
            self.matrix = matrix

    def _next_manifest_id(self) -> str:
        self._manifest_seq += 1
        return f"m-{self._manifest_seq:06d}"

    # -- fleet ----------------------------------------------------------

    def register_vehicle(self, profile: VehicleProfile) -> bool:
        """Register a vehicle. Returns False if it was already registered."""
        with self._lock:
            existing = self.ledger.profiles.get(profile.vehicle_id)
            if existing is not None:
                if existing.variant_id != profile.variant_id:
                    raise Conflict(
                        f"vehicle {profile.vehicle_id!r} is registered as {existing.variant_id!r}, "
                        f"not {profile.variant_id!r}"
                    )
                return False
            self.ledger.profiles[profile.vehicle_id] = profile
            self.ledger.last_seen[profile.vehicle_id] = self.clock()
            self._emit("vehicle_registered", vehicle=profile.vehicle_id, variant=profile.variant_id)
            return True

    def profile(self, vehicle_id: str) -> VehicleProfile:
        try:
            return self.ledger.profiles[vehicle_id]
        except KeyError:
            raise NotFound(f"unknown vehicle {vehicle_id!r}") from None

    def fleet_snapshot(self) -> dict:
        with self._lock:
            vehicles = []
            for vid in sorted(self.ledger.profiles):
                p = self.ledger.profiles[vid]
                vehicles.append(
                    {
                        "vehicle_id": vid,
                        "variant_id": p.variant_id,
                        "last_seen": self.ledger.last_seen.get(vid),
                        "slots": p.installed_state(),
                    }
                )
            return {"vehicles": vehicles, "catalog_revision": self.store.revision}

    # -- campaigns ------------------------------------------------------

    def _check_overlap(self, vehicles: Iterable[str], slots: Optional[set]) -> None:
        vehicles = set(vehicles)
        for other in self.campaigns.values():
            if not other.active or not vehicles & set(other.vehicles):
                continue
            other_slots = other.slots()
            if slots is None or other_slots is None or slots & other_slots:
                raise Conflict(f"campaign {other.campaign_id!r} is still active on the same vehicles and slots")

    def _new_campaign_id(self, prefix: str) -> str:
        while True:
            self._campaign_seq += 1
            cid = f"{prefix}-{self._campaign_seq:04d}"
            if cid not in self.campaigns:
                return cid

    def _set_state(self, campaign: Campaign, state: CampaignState, wave: int = 0) -> None:
        campaign.state = state
        campaign.wave_index = wave
        campaign.history.append({"t": self.clock(), "state": campaign.state_label()})
        self._emit("campaign_state", campaign=campaign.campaign_id, state=campaign.state_label())

    def _set_status(self, campaign: Campaign, vehicle_id: str, status: VehicleStatus) -> None:
        if campaign.status.get(vehicle_id) is status:
            return
        campaign.status[vehicle_id] = status
        self._emit("vehicle_status", campaign=campaign.campaign_id, vehicle=vehicle_id, status=status.value)

    def create_campaign(
        self,
        target_filter: TargetFilter,
        strategy: RolloutStrategy,
        catalog_scope: Optional[Sequence[ArtifactRef]] = None,
        campaign_id: Optional[str] = None,
    ) -> Campaign:
        with self._lock:
            if campaign_id is not None and campaign_id in self.campaigns:
                raise Conflict(f"campaign {campaign_id!r} already exists")
            targets = [vid for vid, p in self.ledger.profiles.items() if target_filter.matches(p)]
            if not targets:
                raise ValidationError("campaign target filter matches no registered vehicle")
            scope = None
            if catalog_scope is not None:
                by_ref = {(a.artifact_id, a.version): a for a in self.catalog()}
                scope_list = []
                for ref in catalog_scope:
                    desc = by_ref.get((ref.artifact_id, ref.version))
                    if desc is None:
                        raise NotFound(f"catalog scope references unknown artifact {ref}")
                    scope_list.append((ref.artifact_id, str(ref.version), desc.slot_name))
                scope = tuple(scope_list)
            campaign_id = campaign_id or self._new_campaign_id("c")
            campaign = Campaign(
                campaign_id=campaign_id,
                target_filter=target_filter,
                strategy=strategy,
                catalog_scope=scope,
                purpose="update",
                created_at=self.clock(),
            )
            self._check_overlap(targets, campaign.slots())
            campaign.waves = assign_waves(campaign_id, targets, strategy.wave_fractions)
            campaign.status = {v: VehicleStatus.PENDING for v in campaign.vehicles}
            campaign.history.append({"t": self.clock(), "state": CampaignState.PENDING.value})
            self.campaigns[campaign_id] = campaign
            self._emit(
                "campaign_created",
                campaign=campaign_id,
                purpose="update",
                waves=[list(w) for w in campaign.waves],
            )
            campaign.wave_started_at = self.clock()
            self._set_state(campaign, CampaignState.WAVE_ACTIVE, 0)
            self._evaluate(campaign)
            return campaign

    def trigger_rollback(
        self,
        variants: Optional[Sequence[str]] = None,
        vehicles: Optional[Sequence[str]] = None,
        campaign_id: Optional[str] = None,
    ) -> Campaign:
        """Send the selected vehicles back to the store's rollback pins."""
        with self._lock:
            if not variants and not vehicles:
                raise ValidationError("rollback needs variant ids or vehicle ids")
            flt = TargetFilter(
                variants=tuple(variants) if variants else None,
                vehicles=tuple(vehicles) if vehicles else None,
            )
            targets = [vid for vid, p in self.ledger.profiles.items() if flt.matches(p)]
            if not targets:
                raise ValidationError("rollback selects no registered vehicle")
            store_pins = self.store.rollback_pins()
            per_vehicle = {}
            for vid in targets:
                profile = self.ledger.profiles[vid]
                pins = {
                    key: ver
                    for key, ver in store_pins.items()
                    if key[0] == profile.variant_id and key[1] in profile.slots()
                }
                if not pins:
                    raise ResolutionError(f"no rollback pins configured for variant {profile.variant_id!r}")
                per_vehicle[vid] = pins
            campaign_id = campaign_id or self._new_campaign_id("rb")
            if campaign_id in self.campaigns:
                raise Conflict(f"campaign {campaign_id!r} already exists")
            campaign = Campaign(
                campaign_id=campaign_id,
                target_filter=flt,
                strategy=RolloutStrategy.full(),
                catalog_scope=None,
                purpose="rollback",
                created_at=self.clock(),
                rollback_pins=per_vehicle,
            )
            self._check_overlap(targets, campaign.slots())
            campaign.waves = [sorted(targets)]
            campaign.status = {v: VehicleStatus.PENDING for v in targets}
            campaign.history.append({"t": self.clock(), "state": CampaignState.PENDING.value})
            self.campaigns[campaign_id] = campaign
            self._emit("campaign_created", campaign=campaign_id, purpose="rollback", waves=[sorted(targets)])
            self._set_state(campaign, CampaignState.ABORTED_ROLLING_BACK)
            return campaign

    def get_campaign(self, campaign_id: str) -> Campaign:
        try:
            return self.campaigns[campaign_id]
        except KeyError:
            raise NotFound(f"unknown campaign {campaign_id!r}") from None

    def active_campaigns(self) -> list[Campaign]:
        return [c for c in self.campaigns.values() if c.active]

    # -- wave gating ----------------------------------------------------

    def evaluate_wave(self, campaign_id: str) -> Campaign:
        with self._lock:
            campaign = self.get_campaign(campaign_id)
            self._evaluate(campaign)
            return campaign

    def evaluate_all(self) -> None:
        with self._lock:
            for campaign in list(self.campaigns.values()):
                if campaign.active:
                    self._evaluate(campaign)

    def _evaluate(self, campaign: Campaign) -> None:
        now = self.clock()
        while campaign.state is CampaignState.WAVE_ACTIVE:
            members = campaign.waves[campaign.wave_index]
            waiting = [
                v for v in members if campaign.status[v] in (VehicleStatus.PENDING, VehicleStatus.OFFERED)
            ]
            if waiting:
                if now - campaign.wave_started_at < campaign.strategy.wave_timeout_ms:
                    return
                for v in waiting:
                    self._set_status(campaign, v, VehicleStatus.FAILED)
            succeeded = sum(1 for v in members if campaign.status[v] is VehicleStatus.SUCCEEDED)
            ratio = succeeded / len(members) if members else 1.0
            if ratio + _EPS >= campaign.strategy.health_threshold:
                if campaign.wave_index + 1 < len(campaign.waves):
                    campaign.wave_started_at = now
                    self._set_state(campaign, CampaignState.WAVE_ACTIVE, campaign.wave_index + 1)
                else:
                    self._set_state(campaign, CampaignState.COMPLETED)
            else:
                self._begin_abort(campaign)
        if campaign.state is CampaignState.ABORTED_ROLLING_BACK:
            targets = self._rollback_targets(campaign)
            if all(campaign.status[v] is VehicleStatus.ROLLED_BACK for v in targets):
                self._set_state(campaign, CampaignState.ABORTED)

    def _begin_abort(self, campaign: Campaign) -> None:
        catalog = self.catalog()
        available = {(a.slot_name, a.version) for a in catalog}
        for vid, before in campaign.pre_state.items():
            variant = self.ledger.profiles[vid].variant_id
            pins = {}
            for slot, version in before.items():
                if (slot, version) in available:
                    pins[(variant, slot)] = version
                else:
                    campaign.unrestorable.append({"vehicle": vid, "slot": slot, "version": str(version)})
            campaign.rollback_pins[vid] = pins
        self._set_state(campaign, CampaignState.ABORTED_ROLLING_BACK)

    @staticmethod
    def _rollback_targets(campaign: Campaign) -> list[str]:
        return sorted(campaign.rollback_pins)

    # -- protocol -------------------------------------------------------

    def _campaign_for(self, vehicle_id: str) -> Optional[Campaign]:
        for campaign in self.campaigns.values():
            if not campaign.active or vehicle_id not in campaign.status:
                continue
            if campaign.state is CampaignState.WAVE_ACTIVE:
                wave = campaign.membership[vehicle_id]
                if wave <= campaign.wave_index and campaign.status[vehicle_id] in (
                    VehicleStatus.PENDING,
                    VehicleStatus.OFFERED,
                ):
                    return campaign
            elif campaign.state is CampaignState.ABORTED_ROLLING_BACK:
                if vehicle_id in campaign.rollback_pins and campaign.status[vehicle_id] is not VehicleStatus.ROLLED_BACK:
                    return campaign
        return None

    def _scoped_catalog(self, campaign: Campaign) -> list[ArtifactDescriptor]:
        catalog = self.catalog()
        if campaign.catalog_scope is None:
            return catalog
        wanted = {(a, v) for (a, v, _) in campaign.catalog_scope}
        return [d for d in catalog if (d.artifact_id, str(d.version)) in wanted]

    def handle_poll(
        self,
        vehicle_id: str,
        reported_state: Optional[Mapping[str, str]] = None,
        known_catalog_revision: Optional[int] = None,
    ) -> Optional[UpdateManifest]:
        """Answer a vehicle poll with a manifest, or None when it is up to date."""
        with self._lock:
            base = self.profile(vehicle_id)
            self.ledger.last_seen[vehicle_id] = self.clock()
            self.evaluate_all()
            profile = base.with_state(reported_state) if reported_state else base
            basis = profile.installed_state()
            campaign = self._campaign_for(vehicle_id)
            if campaign is None:
                return None

            key = (campaign.campaign_id, vehicle_id)
            outstanding = self._outstanding.get(key)
            if outstanding is not None:
                issued = self._issued[outstanding]
                if issued.basis == basis and issued.purpose == self._phase(campaign):
                    return issued.manifest

            if campaign.state is CampaignState.WAVE_ACTIVE:
                manifest = resolve_updates(
                    profile, self._scoped_catalog(campaign), self.matrix, created_at=self.clock()
                )
                before = campaign.pre_state.setdefault(vehicle_id, {})
                for action in manifest.actions:
                    before.setdefault(action.slot_name, action.from_version)
                if manifest.is_empty:
                    self._set_status(campaign, vehicle_id, VehicleStatus.SUCCEEDED)
                    self._evaluate(campaign)
                    return None
                self._set_status(campaign, vehicle_id, VehicleStatus.OFFERED)
                purpose = "update"
            else:
                manifest = resolve_rollback(
                    profile, campaign.rollback_pins[vehicle_id], self.catalog(), created_at=self.clock()
                )
                if manifest.is_empty:
                    self._set_status(campaign, vehicle_id, VehicleStatus.ROLLED_BACK)
                    self._evaluate(campaign)
                    return None
                purpose = "rollback"

            manifest_id = self._next_manifest_id()
            manifest = replace(manifest, manifest_id=manifest_id)
            self._issued[manifest_id] = _Issued(vehicle_id, campaign.campaign_id, purpose, manifest, basis)
            self._outstanding[key] = manifest_id
            self._emit(
                "manifest_issued",
                campaign=campaign.campaign_id,
                purpose=purpose,
                vehicle=vehicle_id,
                wave=campaign.membership.get(vehicle_id, 0),
                active_wave=campaign.wave_index,
                reported_state=basis,
                manifest=manifest.to_dict(),
            )
            return manifest

    @staticmethod
    def _phase(campaign: Campaign) -> str:
        return "update" if campaign.state is CampaignState.WAVE_ACTIVE else "rollback"

    def handle_report(self, report: InstallReport) -> None:
        with self._lock:
            issued = self._issued.get(report.manifest_id)
            if issued is None or issued.vehicle_id != report.vehicle_id:
                raise NotFound(f"manifest {report.manifest_id!r} was not issued to {report.vehicle_id!r}")
            self.ledger.last_seen[report.vehicle_id] = self.clock()
            self.ledger.report_history.append(report)

            profile = self.ledger.profiles[report.vehicle_id]
            known = profile.slots()
            actions = {a.slot_name: a for a in issued.manifest.actions}
            for slot, outcome in report.outcomes.items():
                if slot not in known:
                    continue
                artifact_id = None
                if outcome.status is Outcome.SUCCEEDED and slot in actions:
                    artifact_id = actions[slot].artifact_id
                profile = profile.with_installed(slot, outcome.resulting_version, artifact_id)
            self.ledger.profiles[report.vehicle_id] = profile

            complete = report.all_succeeded and set(actions) <= set(report.outcomes)
            campaign = self.campaigns[issued.campaign_id]
            key = (campaign.campaign_id, report.vehicle_id)
            if self._outstanding.get(key) == report.manifest_id:
                del self._outstanding[key]
            self._emit(
                "report_accepted",
                campaign=campaign.campaign_id,
                purpose=issued.purpose,
                vehicle=report.vehicle_id,
                manifest_id=report.manifest_id,
                complete=complete,
                ledger_state=profile.installed_state(),
            )
            if issued.purpose == "update":
                if campaign.state is CampaignState.WAVE_ACTIVE and campaign.status.get(report.vehicle_id) is VehicleStatus.OFFERED:
                    self._set_status(
                        campaign, report.vehicle_id, VehicleStatus.SUCCEEDED if complete else VehicleStatus.FAILED
                    )
            elif complete and campaign.state is CampaignState.ABORTED_ROLLING_BACK:
                self._set_status(campaign, report.vehicle_id, VehicleStatus.ROLLED_BACK)
            self._evaluate(campaign)
