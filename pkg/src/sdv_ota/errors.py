"""Exception hierarchy shared by the store, service, agent and CLI."""


class OtaError(Exception):
    """Base class for every error raised by this package."""


class VersionError(OtaError, ValueError):
    """Malformed version text."""


class DigestError(OtaError, ValueError):
    """Malformed digest text."""


class ValidationError(OtaError, ValueError):
    """A domain object violates one of its invariants."""


class PermissionDenied(OtaError):
    pass


class NotFound(OtaError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class IntegrityError(OtaError):
    """Payload bytes do not hash to the declared digest."""


class DuplicateArtifact(OtaError):
    pass


class CompositionError(OtaError):
    pass


class ResolutionError(OtaError):
    pass


class Conflict(OtaError):
    """Request clashes with current service state (overlapping campaign, variant change)."""


class ScenarioError(OtaError, ValueError):
    pass
