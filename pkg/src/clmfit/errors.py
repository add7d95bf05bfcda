"""Exception types shared across the package."""


class ClmfitError(Exception):
    """Base class for library-specific failures."""


class ModelFormatError(ClmfitError):
    """A model file is malformed, has the wrong version, or breaks an invariant."""


class BankConfigError(ClmfitError):
    """A detector bank cannot serve a required (landmark, view, scale) request."""


class DegenerateResponseError(ClmfitError):
    """A response map carries zero kernel mass, so no mean-shift direction exists."""


class SingularSystemError(ClmfitError):
    """The normal equations of a parameter update are singular."""


class TrainingDivergedError(ClmfitError):
    """Training loss became non-finite."""
