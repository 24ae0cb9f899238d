"""Exception types shared across the package."""


class DeskSlamError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DeskSlamError):
    pass


class NonFinite(DeskSlamError):
    pass


class NonScalarLoss(DeskSlamError):
    pass


class BehindCamera(DeskSlamError):
    pass


class NonPositiveDepth(DeskSlamError):
    pass


class BadMagic(DeskSlamError):
    pass


class TruncatedPayload(DeskSlamError):
    pass


class NonFiniteValues(DeskSlamError):
    pass


class MissingPrimitiveIds(DeskSlamError):
    pass


class InvalidRange(DeskSlamError):
    pass


class MissingTargets(DeskSlamError):
    pass


class EmptyWindow(DeskSlamError):
    pass


class DivergedPose(DeskSlamError):
    pass


class MissingIndexFile(DeskSlamError):
    pass


class NoAssociations(DeskSlamError):
    pass


class BadParams(DeskSlamError):
    pass


class TooFewPairs(DeskSlamError):
    pass


class EmptyMap(DeskSlamError):
    pass


class EmptyInput(DeskSlamError):
    pass


class ConfigError(DeskSlamError):
    pass
