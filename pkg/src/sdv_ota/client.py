"""Client side of the HTTP+JSON protocol, over real HTTP or in-process."""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from typing import Any, Mapping, Optional, Sequence
from urllib.parse import urlencode

from .api import ApiRouter
from .core import ArtifactDescriptor, ArtifactKind, ArtifactRef, ContentDigest, SemanticVersion, VehicleProfile
from .errors import (
    CompositionError,
    Conflict,
    DuplicateArtifact,
    IntegrityError,
    NotFound,
    OtaError,
    PermissionDenied,
    ResolutionError,
    ValidationError,
)
from .resolver import DependencyMatrix, UpdateAction, UpdateManifest
from .service import InstallReport

_WIRE_ERRORS = {
    "permission_denied": PermissionDenied,
    "not_found": NotFound,
    "duplicate": DuplicateArtifact,
    "conflict": Conflict,
    "integrity": IntegrityError,
    "composition": CompositionError,
    "resolution": ResolutionError,
    "bad_request": ValidationError,
}


class ServiceUnavailable(OtaError, ConnectionError):
    """The service could not be reached at all."""


class HttpTransport:
    def __init__(self, base_url: str, token: Optional[str] = None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def request(self, method: str, path: str, query=None, body: Optional[bytes] = None):
        url = self.base_url + path
        if query:
            url += "?" + urlencode(query)
        req = urllib.request.Request(url, data=body, method=method)
        if body is not None:
            req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, dict(resp.headers), resp.read()
        except urllib.error.HTTPError as err:
            return err.code, dict(err.headers), err.read()
        except (urllib.error.URLError, ConnectionError, TimeoutError) as err:
            raise ServiceUnavailable(f"cannot reach {self.base_url}: {getattr(err, 'reason', err)}") from None


class InProcessTransport:
    """Calls the router directly but keeps the JSON encode/decode step."""

    def __init__(self, router: ApiRouter, token: Optional[str] = None):
        self.router = router
        self.token = token

    def request(self, method: str, path: str, query=None, body: Optional[bytes] = None):
        query = {k: str(v) for k, v in (query or {}).items()}
        response = self.router.handle(method, path, query, body, self.token)
        if response.body is None:
            data = b""
        elif response.is_binary:
            data = bytes(response.body)
        else:
            data = json.dumps(response.body, sort_keys=True).encode("utf-8")
        return response.status, dict(response.headers), data


class FleetClient:
    """Typed wrapper over a transport. Raises the package's own exceptions."""

    def __init__(self, transport):
        self.transport = transport

    def _call(self, method: str, path: str, query=None, payload: Any = None, raw: bool = False):
        body = None if payload is None else json.dumps(payload, sort_keys=True).encode("utf-8")
        status, _headers, data = self.transport.request(method, "/api/v1" + path, query, body)
        if status >= 400:
            try:
                err = json.loads(data.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                err = {"error": "bad_request", "message": data.decode("utf-8", "replace")}
            cls = _WIRE_ERRORS.get(err.get("error"), OtaError)
            raise cls(err.get("message", f"HTTP {status}"))
        if raw:
            return status, data
        return status, (json.loads(data.decode("utf-8")) if data else None)

    # vehicle protocol
    def register(self, profile: VehicleProfile) -> dict:
        return self._call("POST", "/vehicles", payload=profile.to_dict())[1]

    def poll(
        self, vehicle_id: str, state: Optional[Mapping[str, str]] = None, catalog_revision: Optional[int] = None
    ) -> Optional[UpdateManifest]:
        query = {"vehicle_id": vehicle_id}
        if catalog_revision is not None:
            query["catalog_revision"] = str(catalog_revision)
        if state is not None:
            query["state"] = json.dumps(dict(state), sort_keys=True)
        status, body = self._call("GET", "/updates", query)
        return None if status == 204 else UpdateManifest.from_dict(body)

    def report(self, report: InstallReport) -> dict:
        return self._call("POST", "/reports", payload=report.to_dict())[1]

    def fetch_blob(self, digest: ContentDigest) -> bytes:
        return self._call("GET", f"/blobs/{digest.hex}", raw=True)[1]

    def download(self, action: UpdateAction) -> bytes:
        return self.fetch_blob(action.digest)

    # operator API
    def publish(self, descriptor: ArtifactDescriptor, payload: bytes) -> ArtifactDescriptor:
        body = {"descriptor": descriptor.to_dict(), "payload_b64": base64.b64encode(payload).decode("ascii")}
        return ArtifactDescriptor.from_dict(self._call("POST", "/artifacts", payload=body)[1]["descriptor"])

    def compose(self, container: ArtifactRef, model: ArtifactRef, version: SemanticVersion) -> ArtifactDescriptor:
        body = {"container": container.to_dict(), "model": model.to_dict(), "version": str(version)}
        return ArtifactDescriptor.from_dict(self._call("POST", "/artifacts/compose", payload=body)[1]["descriptor"])

    def catalog(self, kind: Optional[ArtifactKind] = None, slot: Optional[str] = None, tag: Optional[str] = None):
        query = {k: v for k, v in (("kind", kind and ArtifactKind(kind).value), ("slot", slot), ("tag", tag)) if v}
        body = self._call("GET", "/artifacts", query)[1]
        return [ArtifactDescriptor.from_dict(d) for d in body["artifacts"]], body["revision"]

    def descriptor(self, artifact_id: str, version: SemanticVersion) -> ArtifactDescriptor:
        return ArtifactDescriptor.from_dict(self._call("GET", f"/artifacts/{artifact_id}/{version}")[1])

    def set_pin(self, variant_id: str, slot_name: str, version: SemanticVersion) -> dict:
        body = {"variant_id": variant_id, "slot_name": slot_name, "version": str(version)}
        return self._call("PUT", "/pins", payload=body)[1]

    def set_matrix(self, matrix: DependencyMatrix) -> dict:
        return self._call("PUT", "/matrix", payload=matrix.to_dict())[1]

    def create_campaign(self, spec: Mapping[str, Any]) -> dict:
        return self._call("POST", "/campaigns", payload=dict(spec))[1]

    def campaign(self, campaign_id: str) -> dict:
        return self._call("GET", f"/campaigns/{campaign_id}")[1]

    def rollback(
        self, variants: Optional[Sequence[str]] = None, vehicles: Optional[Sequence[str]] = None,
        campaign_id: Optional[str] = None,
    ) -> dict:
        body = {"variants": list(variants or []) or None, "vehicles": list(vehicles or []) or None}
        if campaign_id:
            body["campaign_id"] = campaign_id
        return self._call("POST", "/rollbacks", payload=body)[1]

    def fleet(self) -> dict:
        return self._call("GET", "/fleet")[1]
