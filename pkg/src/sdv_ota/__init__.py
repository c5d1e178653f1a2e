"""Over-the-air software updates for variant-rich vehicle fleets.

Cloud side: :class:`ArtifactStore`, :class:`CloudService` and the HTTP API.
Vehicle side: :class:`ClientAgent` driving a :class:`SimulatedDevice`.
:func:`run_scenario` ties both together in a deterministic simulator.
"""

from .agent import ClientAgent, Phase
from .core import (
    ArtifactDescriptor,
    ArtifactKind,
    ArtifactRef,
    ContentDigest,
    EcuDescriptor,
    HardwareRequirement,
    ModelMetadata,
    SemanticVersion,
    VehicleProfile,
    compare_versions,
    compute_digest,
    parse_version,
)
from .installers import SimulatedDevice
from .resolver import DependencyMatrix, UpdateManifest, VersionConstraint, resolve_rollback, resolve_updates
from .service import CloudService, RolloutStrategy
from .sim import replay_check, run_scenario
from .store import ArtifactStore, Permission

__version__ = "0.1.0"
