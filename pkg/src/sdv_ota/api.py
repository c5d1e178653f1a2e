"""Transport-independent request router for the cloud service's HTTP+JSON API.

``ApiRouter.handle`` takes an already-parsed request and returns an
:class:`ApiResponse`. The stdlib HTTP server and the simulator's in-process
transport both call it, so the two transports share one code path.
"""

from __future__ import annotations

import base64
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from .core import ArtifactDescriptor, ArtifactKind, ArtifactRef, ContentDigest, VehicleProfile, parse_version
from .errors import (
    CompositionError,
    Conflict,
    DigestError,
    DuplicateArtifact,
    IntegrityError,
    NotFound,
    OtaError,
    PermissionDenied,
    ResolutionError,
    ValidationError,
    VersionError,
)
from .resolver import DependencyMatrix
from .service import CloudService, InstallReport, RolloutStrategy, TargetFilter
from .store import Permission

log = logging.getLogger(__name__)

API_PREFIX = "/api/v1"

# error class -> (HTTP status, wire name); first match wins
ERROR_STATUS = [
    (PermissionDenied, 403, "permission_denied"),
    (NotFound, 404, "not_found"),
    (DuplicateArtifact, 409, "duplicate"),
    (Conflict, 409, "conflict"),
    (IntegrityError, 422, "integrity"),
    (CompositionError, 422, "composition"),
    (ResolutionError, 422, "resolution"),
    (VersionError, 400, "bad_request"),
    (DigestError, 400, "bad_request"),
    (ValidationError, 400, "bad_request"),
    (OtaError, 400, "bad_request"),
]


@dataclass
class ApiResponse:
    status: int
    body: Any = None
    headers: dict = field(default_factory=dict)

    @property
    def is_binary(self) -> bool:
        return isinstance(self.body, (bytes, bytearray))


def _json_body(body: Optional[bytes]) -> Any:
    if not body:
        raise ValidationError("request body must be a JSON document")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed JSON body: {exc}") from None


def campaign_from_spec(service: CloudService, spec: Mapping[str, Any]):
    scope = spec.get("catalog_scope")
    return service.create_campaign(
        TargetFilter.from_dict(spec.get("filter")),
        RolloutStrategy.from_dict(spec.get("strategy") or {}),
        None if scope is None else [ArtifactRef.from_dict(r) for r in scope],
        campaign_id=spec.get("campaign_id"),
    )


class ApiRouter:
    def __init__(self, service: CloudService):
        self.service = service
        self.store = service.store
        self._routes: list[tuple[str, re.Pattern, Optional[Permission], Callable]] = []
        r = self._route
        r("POST", r"/vehicles", Permission.FETCH, self._register)
        r("GET", r"/updates", Permission.FETCH, self._poll)
        r("POST", r"/reports", Permission.FETCH, self._report)
        r("POST", r"/campaigns", Permission.ADMIN, self._create_campaign)
        r("GET", r"/campaigns", Permission.FETCH, self._list_campaigns)
        r("GET", r"/campaigns/(?P<cid>[^/]+)", Permission.FETCH, self._get_campaign)
        r("POST", r"/rollbacks", Permission.ADMIN, self._rollback)
        r("GET", r"/fleet", Permission.FETCH, self._fleet)
        r("GET", r"/blobs/(?P<hex>[0-9a-f]{64})", Permission.FETCH, self._blob)
        r("POST", r"/artifacts", Permission.PUBLISH, self._publish)
        r("GET", r"/artifacts", Permission.FETCH, self._catalog)
        r("POST", r"/artifacts/compose", Permission.PUBLISH, self._compose)
        r("GET", r"/artifacts/(?P<aid>[^/]+)/(?P<ver>[^/]+)", Permission.FETCH, self._descriptor)
        r("PUT", r"/pins", Permission.ADMIN, self._set_pin)
        r("GET", r"/pins", Permission.FETCH, self._pins)
        r("PUT", r"/matrix", Permission.ADMIN, self._set_matrix)
        r("GET", r"/matrix", Permission.FETCH, self._matrix)

    def _route(self, method: str, pattern: str, permission: Optional[Permission], handler: Callable) -> None:
        self._routes.append((method, re.compile(f"^{API_PREFIX}{pattern}$"), permission, handler))

    def handle(
        self,
        method: str,
        path: str,
        query: Optional[Mapping[str, str]] = None,
        body: Optional[bytes] = None,
        token: Optional[str] = None,
    ) -> ApiResponse:
        path_matched = False
        for m, pattern, permission, handler in self._routes:
            match = pattern.match(path)
            if match is None:
                continue
            path_matched = True
            if m != method:
                continue
            try:
                if permission is not None:
                    self.store.authorize(token, permission)
                return handler(dict(query or {}), body, token, **match.groupdict())
            except OtaError as exc:
                return self.error_response(exc)
            except (KeyError, TypeError, ValueError) as exc:
                return ApiResponse(400, {"error": "bad_request", "message": f"{type(exc).__name__}: {exc}"})
        if path_matched:
            return ApiResponse(405, {"error": "method_not_allowed", "message": f"{method} {path}"})
        return ApiResponse(404, {"error": "not_found", "message": f"no route for {path}"})

    @staticmethod
    def error_response(exc: OtaError) -> ApiResponse:
        for cls, status, name in ERROR_STATUS:
            if isinstance(exc, cls):
                return ApiResponse(status, {"error": name, "message": str(exc)})
        raise AssertionError("unreachable")  # OtaError is the last row

    # -- vehicle protocol -----------------------------------------------

    def _register(self, query, body, token):
        profile = VehicleProfile.from_dict(_json_body(body))
        created = self.service.register_vehicle(profile)
        return ApiResponse(201 if created else 200, {"vehicle_id": profile.vehicle_id, "registered": created})

    def _poll(self, query, body, token):
        vehicle_id = query.get("vehicle_id")
        if not vehicle_id:
            raise ValidationError("vehicle_id query parameter is required")
        revision = query.get("catalog_revision")
        state = json.loads(query["state"]) if query.get("state") else None
        manifest = self.service.handle_poll(vehicle_id, state, None if revision is None else int(revision))
        headers = {"X-Catalog-Revision": str(self.store.revision)}
        if manifest is None:
            return ApiResponse(204, None, headers)
        return ApiResponse(200, manifest.to_dict(), headers)

    def _report(self, query, body, token):
        report = InstallReport.from_dict(_json_body(body))
        self.service.handle_report(report)
        return ApiResponse(202, {"manifest_id": report.manifest_id, "accepted": True})

    # -- operator API ---------------------------------------------------

    def _create_campaign(self, query, body, token):
        campaign = campaign_from_spec(self.service, _json_body(body))
        return ApiResponse(201, campaign.to_dict())

    def _list_campaigns(self, query, body, token):
        return ApiResponse(200, {"campaigns": [c.to_dict() for c in self.service.campaigns.values()]})

    def _get_campaign(self, query, body, token, cid):
        return ApiResponse(200, self.service.get_campaign(cid).to_dict())

    def _rollback(self, query, body, token):
        data = _json_body(body)
        campaign = self.service.trigger_rollback(
            data.get("variants"), data.get("vehicles"), campaign_id=data.get("campaign_id")
        )
        return ApiResponse(201, campaign.to_dict())

    def _fleet(self, query, body, token):
        return ApiResponse(200, self.service.fleet_snapshot())

    # -- artifact store -------------------------------------------------

    def _blob(self, query, body, token, hex):
        return ApiResponse(200, self.store.fetch_payload(ContentDigest(hex), token))

    def _publish(self, query, body, token):
        data = _json_body(body)
        payload = base64.b64decode(data["payload_b64"], validate=True)
        descriptor = ArtifactDescriptor.from_dict(data["descriptor"])
        stored = self.store.publish(descriptor, payload, token)
        return ApiResponse(201, {"descriptor": stored.to_dict(), "revision": self.store.revision})

    def _catalog(self, query, body, token):
        tags = {}
        if query.get("tag"):
            key, _, value = query["tag"].partition("=")
            tags[key] = value
        kind = query.get("kind")
        records, revision = self.store.list_catalog(
            token, kind=None if kind is None else ArtifactKind(kind), slot=query.get("slot"), tags=tags
        )
        return ApiResponse(200, {"artifacts": [d.to_dict() for d in records], "revision": revision})

    def _compose(self, query, body, token):
        data = _json_body(body)
        stored = self.store.compose_container_with_model(
            ArtifactRef.from_dict(data["container"]),
            ArtifactRef.from_dict(data["model"]),
            parse_version(data["version"]),
            token,
        )
        return ApiResponse(201, {"descriptor": stored.to_dict(), "revision": self.store.revision})

    def _descriptor(self, query, body, token, aid, ver):
        return ApiResponse(200, self.store.fetch_descriptor(aid, parse_version(ver), token).to_dict())

    def _set_pin(self, query, body, token):
        data = _json_body(body)
        self.store.set_rollback_pin(data["variant_id"], data["slot_name"], parse_version(data["version"]), token)
        return ApiResponse(200, {"pinned": True, **data})

    def _pins(self, query, body, token):
        pins = [
            {"variant_id": v, "slot_name": s, "version": str(ver)}
            for (v, s), ver in sorted(self.store.rollback_pins().items())
        ]
        return ApiResponse(200, {"pins": pins})

    def _set_matrix(self, query, body, token):
        matrix = DependencyMatrix.from_dict(_json_body(body))
        self.service.set_matrix(matrix)
        return ApiResponse(200, matrix.to_dict())

    def _matrix(self, query, body, token):
        return ApiResponse(200, self.service.matrix.to_dict())
