"""Exception hierarchy shared by every latentcloak module."""

from __future__ import annotations


class LatentCloakError(Exception):
    """Root of all errors raised by this package."""


class ConfigError(LatentCloakError, ValueError):
    """Invalid parameter, config document or CLI flag."""


class ShapeError(LatentCloakError, ValueError):
    """Array shape or vector dimension does not match the contract."""


class NonFiniteError(LatentCloakError, ArithmeticError):
    """A latent or loss became NaN/inf during an iterative stage."""

    def __init__(self, stage: str, step: int, norm: float, detail: str = ""):
        self.stage = stage
        self.step = step
        self.norm = norm
        msg = f"{stage}: non-finite value at step {step} (norm={norm!r})"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class DegenerateFeatureError(LatentCloakError, ValueError):
    """A feature vector has zero norm, so its direction is undefined."""


class KeyMismatchError(LatentCloakError, ValueError):
    """Two attention map sets do not cover the same (timestep, layer, head) keys."""


class UnknownModelError(LatentCloakError, KeyError):
    """Registry lookup for an id that was never registered."""


class VerificationError(LatentCloakError):
    """Base class for remote verification failures."""


class VerificationAuthError(VerificationError):
    """The service rejected the credentials (HTTP 401/403)."""


class VerificationTimeoutError(VerificationError):
    """The service did not answer within the configured timeout."""


class VerificationProtocolError(VerificationError):
    """The service answered with a body that does not follow the wire format."""


class VerificationUnavailableError(VerificationError):
    """Transient failures persisted after all retry attempts."""


class MissingRunsError(LatentCloakError):
    """Evaluation was asked for manifest entries that have no completed run."""

    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"{len(missing)} entries have no completed run: {', '.join(missing)}")


class ReportSchemaError(LatentCloakError):
    """A generated report does not validate against the published schema."""
