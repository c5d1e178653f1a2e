"""Content-addressed, versioned artifact store with token-based access control.

Firmware binaries, container images and models share one index; the three
"repositories" are views filtered by :class:`ArtifactKind`. On disk the store
is a ``blobs/`` directory (one file per digest hex) and a canonical
``index.json`` that is rewritten atomically on every mutation.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .core import (
    ArtifactDescriptor,
    ArtifactKind,
    ArtifactRef,
    ContentDigest,
    SemanticVersion,
    compute_digest,
    parse_version,
)
from .errors import (
    CompositionError,
    DuplicateArtifact,
    IntegrityError,
    NotFound,
    PermissionDenied,
    ValidationError,
)
from .images import FormatError, pack_image, pack_parts, unpack_image, unpack_parts

log = logging.getLogger(__name__)

INDEX_FILE = "index.json"
BLOB_DIR = "blobs"


class Permission(str, enum.Enum):
    PUBLISH = "PUBLISH"
    FETCH = "FETCH"
    ADMIN = "ADMIN"


def load_tokens(path: str | Path) -> dict[str, frozenset]:
    raw = json.loads(Path(path).read_text())
    return {token: frozenset(Permission(p) for p in perms) for token, perms in raw.items()}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)


@dataclass(frozen=True)
class _Snapshot:
    records: Mapping[tuple, ArtifactDescriptor] = field(default_factory=dict)
    pins: Mapping[tuple, SemanticVersion] = field(default_factory=dict)
    revision: int = 0


class ArtifactStore:
    """Artifact repository.

    Mutations are serialised by a lock and publish a fresh immutable snapshot,
    so readers never see a half-applied change. Pass ``root=None`` for a purely
    in-memory store (used by the simulator).
    """

    def __init__(self, root: Optional[str | Path] = None, tokens: Optional[Mapping[str, Iterable]] = None):
        self.root = Path(root) if root is not None else None
        self._tokens = {t: frozenset(Permission(p) for p in perms) for t, perms in (tokens or {}).items()}
        self._lock = threading.Lock()
        self._blobs: dict[str, bytes] = {}
        self._snap = _Snapshot()
        if self.root is not None:
            (self.root / BLOB_DIR).mkdir(parents=True, exist_ok=True)
            index = self.root / INDEX_FILE
            if index.exists():
                self._snap = self._decode_index(json.loads(index.read_bytes()))

    # -- access control -------------------------------------------------

    def permissions(self, token: Optional[str]) -> frozenset:
        return self._tokens.get(token or "", frozenset())

    def authorize(self, token: Optional[str], permission: Permission) -> None:
        if permission not in self.permissions(token):
            raise PermissionDenied(f"token lacks {permission.value} permission")

    # -- persistence ----------------------------------------------------

    def _encode_index(self, snap: _Snapshot) -> dict:
        return {
            "records": {
                f"{aid}@{ver}": desc.to_dict() for (aid, ver), desc in sorted(snap.records.items())
            },
            "rollback_pins": [
                {"variant_id": variant, "slot_name": slot, "version": str(ver)}
                for (variant, slot), ver in sorted(snap.pins.items())
            ],
            "revision": snap.revision,
        }

    @staticmethod
    def _decode_index(data: Mapping) -> _Snapshot:
        records = {}
        for desc_data in data.get("records", {}).values():
            desc = ArtifactDescriptor.from_dict(desc_data)
            records[(desc.artifact_id, desc.version)] = desc
        pins = {
            (p["variant_id"], p["slot_name"]): parse_version(p["version"]) for p in data.get("rollback_pins", [])
        }
        return _Snapshot(records, pins, int(data.get("revision", 0)))

    def canonical_index(self) -> bytes:
        return canonical_json(self._encode_index(self._snap))

    def _commit(self, snap: _Snapshot) -> None:
        if self.root is not None:
            _atomic_write(self.root / INDEX_FILE, canonical_json(self._encode_index(snap)))
        self._snap = snap

    def _store_blob(self, digest: ContentDigest, payload: bytes) -> None:
        if self.root is not None:
            path = self.root / BLOB_DIR / digest.hex
            if not path.exists():
                _atomic_write(path, payload)
        else:
            self._blobs[digest.hex] = payload

    def _read_blob(self, digest: ContentDigest) -> Optional[bytes]:
        if self.root is None:
            return self._blobs.get(digest.hex)
        path = self.root / BLOB_DIR / digest.hex
        return path.read_bytes() if path.exists() else None

    # -- operations -----------------------------------------------------

    def publish(self, descriptor: ArtifactDescriptor, payload: bytes, token: Optional[str]) -> ArtifactDescriptor:
        self.authorize(token, Permission.PUBLISH)
        return self._publish(descriptor, payload)

    def _publish(self, descriptor: ArtifactDescriptor, payload: bytes) -> ArtifactDescriptor:
        actual = compute_digest(payload)
        if actual != descriptor.digest:
            raise IntegrityError(f"payload digest {actual} does not match declared {descriptor.digest}")
        if descriptor.size_bytes != len(payload):
            raise ValidationError(f"declared size {descriptor.size_bytes} != payload size {len(payload)}")
        with self._lock:
            snap = self._snap
            key = (descriptor.artifact_id, descriptor.version)
            if key in snap.records:
                raise DuplicateArtifact(f"{descriptor.artifact_id}@{descriptor.version} already published")
            if descriptor.embedded_model is not None:
                model = snap.records.get((descriptor.embedded_model.artifact_id, descriptor.embedded_model.version))
                if model is None or model.kind is not ArtifactKind.AI_MODEL:
                    raise ValidationError(f"embedded model {descriptor.embedded_model} is not a published AI_MODEL")
            self._store_blob(descriptor.digest, payload)
            records = dict(snap.records)
            records[key] = descriptor
            self._commit(replace(snap, records=records, revision=snap.revision + 1))
        log.info("published %s@%s (%s)", descriptor.artifact_id, descriptor.version, descriptor.kind.value)
        return descriptor

    def fetch_descriptor(self, artifact_id: str, version: SemanticVersion, token: Optional[str]) -> ArtifactDescriptor:
        self.authorize(token, Permission.FETCH)
        desc = self._snap.records.get((artifact_id, version))
        if desc is None:
            raise NotFound(f"no artifact {artifact_id}@{version}")
        return desc

    def fetch_payload(self, digest: ContentDigest, token: Optional[str]) -> bytes:
        self.authorize(token, Permission.FETCH)
        return self.payload(digest)

    def payload(self, digest: ContentDigest) -> bytes:
        """Unchecked blob read for in-process owners (the cloud service)."""
        data = self._read_blob(digest)
        if data is None:
            raise NotFound(f"no blob {digest}")
        if compute_digest(data) != digest:
            raise IntegrityError(f"stored blob {digest} is corrupt")
        return data

    def list_catalog(
        self,
        token: Optional[str],
        *,
        kind: Optional[ArtifactKind] = None,
        slot: Optional[str] = None,
        tags: Optional[Mapping[str, str]] = None,
    ) -> tuple[list[ArtifactDescriptor], int]:
        self.authorize(token, Permission.FETCH)
        records, revision = self.catalog()
        out = [
            d for d in records
            if (kind is None or d.kind is ArtifactKind(kind))
            and (slot is None or d.slot_name == slot)
            and all(d.tags.get(k) == v for k, v in (tags or {}).items())
        ]
        return out, revision

    def catalog(self) -> tuple[list[ArtifactDescriptor], int]:
        snap = self._snap
        return [snap.records[k] for k in sorted(snap.records)], snap.revision

    @property
    def revision(self) -> int:
        return self._snap.revision

    def set_rollback_pin(self, variant_id: str, slot_name: str, version: SemanticVersion, token: Optional[str]) -> None:
        self.authorize(token, Permission.ADMIN)
        with self._lock:
            snap = self._snap
            if not any(d.slot_name == slot_name and d.version == version for d in snap.records.values()):
                raise NotFound(f"no artifact for slot {slot_name!r} at version {version}")
            pins = dict(snap.pins)
            pins[(variant_id, slot_name)] = version
            self._commit(replace(snap, pins=pins))

    def rollback_pins(self) -> dict[tuple, SemanticVersion]:
        return dict(self._snap.pins)

    def compose_container_with_model(
        self,
        container: ArtifactRef,
        model: ArtifactRef,
        new_version: SemanticVersion,
        token: Optional[str],
    ) -> ArtifactDescriptor:
        """Publish a new container version that carries ``model`` inside it."""
        self.authorize(token, Permission.PUBLISH)
        records = self._snap.records
        base = records.get((container.artifact_id, container.version))
        mdl = records.get((model.artifact_id, model.version))
        if base is None or mdl is None:
            missing = container if base is None else model
            raise NotFound(f"no artifact {missing}")
        if base.kind is not ArtifactKind.CONTAINER_IMAGE or mdl.kind is not ArtifactKind.AI_MODEL:
            raise CompositionError(
                f"expected CONTAINER_IMAGE + AI_MODEL, got {base.kind.value} + {mdl.kind.value}"
            )
        container_bytes = self.payload(base.digest)
        if base.embedded_model is not None:
            # Recomposing: replace the model part rather than nesting.
            container_bytes, _ = unpack_parts(container_bytes)
        try:
            # the image header must carry the composed version or the device health probe rejects it
            container_bytes = pack_image(new_version, unpack_image(container_bytes).body)
        except FormatError as exc:
            raise CompositionError(f"container {container} is not a loadable image: {exc}") from None
        payload = pack_parts(container_bytes, self.payload(mdl.digest))
        try:
            requirement = base.requirement.merged(mdl.requirement)
        except ValidationError as exc:
            raise CompositionError(str(exc)) from None
        tags = dict(base.tags)
        tags["embedded_model"] = str(model)
        descriptor = ArtifactDescriptor(
            artifact_id=base.artifact_id,
            kind=ArtifactKind.CONTAINER_IMAGE,
            slot_name=base.slot_name,
            version=new_version,
            digest=compute_digest(payload),
            size_bytes=len(payload),
            requirement=requirement,
            tags=tags,
            embedded_model=model,
        )
        return self._publish(descriptor, payload)
